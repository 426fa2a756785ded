"""
GemFlow entry point: python -m gemflow <command>
"""

import sys

from gemflow.config import Config
from gemflow.errors import ConfigError

# thread caps only take effect if exported before numpy loads its BLAS
try:
    Config.export_thread_limit()
except ConfigError as exc:
    print(f"❌ {exc}", file=sys.stderr)
    sys.exit(exc.exit_code)

from gemflow.main import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
