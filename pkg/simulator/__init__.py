# simulator/__init__.py - Galerkin simulator core
