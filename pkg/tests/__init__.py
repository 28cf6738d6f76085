"""AFRAN test suite; ``conftest.py`` puts the project root on ``sys.path``."""
