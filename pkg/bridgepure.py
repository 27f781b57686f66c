"""
BridgePure command line entry point.

    python bridgepure.py experiment --config configs/desk_scale.json
    python bridgepure.py --help
"""
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

from cli import main  # noqa: E402

if __name__ == "__main__":
    main()
