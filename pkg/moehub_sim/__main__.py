import sys

from moehub_sim.main import main


if __name__ == "__main__":
    sys.exit(main())
