# Apps package for feature-critic domain generalisation
# This makes apps/ a proper Python package
