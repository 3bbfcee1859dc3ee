import sys

from haptic_act.cli import main

if __name__ == "__main__":
    sys.exit(main())
