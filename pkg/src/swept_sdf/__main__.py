"""
Allows running the command line interface as a module::

    python -m swept_sdf plan --config scenario.ini
"""
from swept_sdf.cli import run

if __name__ == "__main__":
    run()
