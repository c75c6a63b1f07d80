# analysis/__init__.py - Diagnostics, ensembles and limit studies
