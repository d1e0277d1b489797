import sys

from .utils import limit_native_threads, load_environment

# thread caps must be in the environment before numpy loads
load_environment()
limit_native_threads()

from .cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
