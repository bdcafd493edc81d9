"""
模块入口点 - 当使用 python -m relpose_adapt 运行时的入口点
"""

import sys

if __name__ == "__main__":
    from relpose_adapt import main
    sys.exit(main())
