"""
Main entry point for the Relational Pose Adaptation MCP Server.

Owns `.env` loading and logging setup for both the CLI and the server, and
exposes read-only tools over a pipeline artifact directory
(checkpoints/, data/, reports/, plots/).
Supports the stdio, sse and streamable-http transports of standalone FastMCP.
"""

import os
import sys
# Set required environment variable for FastMCP 2.8.1+
os.environ.setdefault('FASTMCP_LOG_LEVEL', 'INFO')

TRANSPORTS = ('stdio', 'sse', 'streamable-http')
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


def _parse_env_line(line):
    """Return (key, value) for a `KEY=value` line, or None for blanks and comments."""
    line = line.strip()
    if not line or line.startswith('#') or '=' not in line:
        return None
    key, value = (part.strip() for part in line.split('=', 1))
    if len(value) >= 2 and value[0] == value[-1] and value[0] in ('"', "'"):
        value = value[1:-1]
    return key, value


def load_env_file(env_file_path='.env'):
    """
    Load environment variables from a .env file if it exists.

    Variables already present in the environment win. Messages go to stderr so
    that stdout stays clean for the stdio transport and for CLI output such as
    `relpose-adapt schema`.

    Args:
        env_file_path (str): Path to the .env file
    """
    if not os.path.exists(env_file_path):
        return
    print(f"Loading environment variables from {env_file_path}", file=sys.stderr)
    with open(env_file_path, 'r', encoding='utf-8') as f:
        for entry in filter(None, map(_parse_env_line, f)):
            os.environ.setdefault(*entry)


load_env_file()

from fastmcp import FastMCP  # noqa: E402
from .tools import report_tools  # noqa: E402


def get_transport_config():
    """
    Transport settings from MCP_TRANSPORT / MCP_HOST / MCP_PORT / MCP_PATH / MCP_SSE_PATH.

    Returns:
        dict: transport, host, port, path, sse_path
    """
    transport = os.getenv('MCP_TRANSPORT', 'stdio').lower()
    if transport == 'http':
        transport = 'streamable-http'
    if transport not in TRANSPORTS:
        print(f"Warning: Invalid transport '{transport}'. Falling back to 'stdio'.", file=sys.stderr)
        transport = 'stdio'
    return {
        'transport': transport,
        'host': os.getenv('MCP_HOST', '127.0.0.1'),
        'port': int(os.getenv('MCP_PORT', '8000')),
        'path': os.getenv('MCP_PATH', '/mcp'),
        'sse_path': os.getenv('MCP_SSE_PATH', '/sse'),
    }


def _rotating_handler(path, level, max_bytes, backups, formatter):
    import logging.handlers

    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    handler = logging.handlers.RotatingFileHandler(path, maxBytes=max_bytes, backupCount=backups, encoding='utf-8')
    handler.setLevel(level)
    handler.setFormatter(formatter)
    return handler


def setup_logging(debug_mode, log_dir=None):
    """
    配置根日志: 控制台 (stderr) + 轮转的主日志、错误日志, 调试模式下再加调试日志

    环境变量: LOG_LEVEL, LOG_FILE_PATH, LOG_ERROR_FILE_PATH, LOG_DEBUG_FILE_PATH,
    LOG_MAX_SIZE (MB), LOG_BACKUP_COUNT

    Args:
        debug_mode (bool): 是否启用 DEBUG
        log_dir (str): LOG_FILE_PATH 未设置时的日志目录 (命令行传入 <out>/logs)
    """
    import logging

    log_dir = log_dir or 'logs'
    level_name = os.getenv('LOG_LEVEL', 'INFO').upper()
    level = logging.DEBUG if debug_mode else getattr(logging, level_name if level_name in LOG_LEVELS else 'INFO')
    max_bytes = int(os.getenv('LOG_MAX_SIZE', '10')) * 1024 * 1024
    backups = int(os.getenv('LOG_BACKUP_COUNT', '5'))
    paths = {
        'info': os.getenv('LOG_FILE_PATH', os.path.join(log_dir, 'relpose.log')),
        'error': os.getenv('LOG_ERROR_FILE_PATH', os.path.join(log_dir, 'relpose_error.log')),
        'debug': os.getenv('LOG_DEBUG_FILE_PATH', os.path.join(log_dir, 'relpose_debug.log')),
    }

    detailed = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - [%(filename)s:%(lineno)d] - %(message)s')
    simple = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    console = logging.StreamHandler()
    console.setLevel(level)
    console.setFormatter(detailed if debug_mode else simple)
    root_logger.addHandler(console)
    root_logger.addHandler(_rotating_handler(paths['info'], logging.INFO, max_bytes, backups, detailed))
    root_logger.addHandler(_rotating_handler(paths['error'], logging.ERROR, max_bytes, max(1, backups - 2), detailed))
    if level == logging.DEBUG:
        root_logger.addHandler(
            _rotating_handler(paths['debug'], logging.DEBUG, max_bytes * 5, max(1, backups - 3), detailed)
        )

    logging.getLogger('relpose_adapt').setLevel(level)
    # 第三方库保持 WARNING
    for name in ('matplotlib', 'PIL'):
        logging.getLogger(name).setLevel(logging.WARNING)

    logging.info(f"日志初始化完成 - 级别: {logging.getLevelName(level)}, 调试: {debug_mode}, "
                 f"目录: {os.path.abspath(os.path.dirname(paths['info']) or '.')}, "
                 f"单文件 {max_bytes // 1024 // 1024}MB x {backups}")


mcp = FastMCP("Relational Pose Adaptation Server")


def register_tools():
    """Register the read-only artifact tools with the MCP server."""

    import logging
    logger = logging.getLogger(__name__)

    @mcp.tool()
    def describeSkeleton():
        """骨架描述 - 返回 17 关节骨架的关节名称、父节点、左右对称对与名义骨长"""
        logger.debug("调用骨架描述工具")
        return report_tools.describeSkeleton()

    @mcp.tool()
    def getExperimentReport(out_dir: str = None):
        """实验报告查询 - 读取产物目录中的 report.json (默认目录由 RELPOSE_OUT_DIR 指定)"""
        logger.debug(f"调用实验报告查询工具: out_dir={out_dir}")
        return report_tools.getExperimentReport(out_dir)

    @mcp.tool()
    def getLatentDistances(out_dir: str = None, space: str = None):
        """潜空间距离查询 - 返回各关系规则在 pose / motion 空间的平均潜空间距离、排序与选中规则"""
        logger.debug(f"调用潜空间距离查询工具: out_dir={out_dir}, space={space}")
        return report_tools.getLatentDistances(out_dir, space)

    @mcp.tool()
    def evaluateStage(stage: str = "adapt", domain: str = "target", out_dir: str = None):
        """阶段评估 - 用源域编码器 (source) 或适配后的编码器 (adapt) 在 source / target / unseen 域上计算 MPJPE、PA-MPJPE、PCK、AUC"""
        logger.debug(f"调用阶段评估工具: stage={stage}, domain={domain}, out_dir={out_dir}")
        return report_tools.evaluateStage(stage, domain, out_dir)

    @mcp.tool()
    def getPipelineStatus(out_dir: str = None):
        """流水线状态查询 - 返回已完成阶段、下一阶段以及检查点校验和是否完整"""
        logger.debug(f"调用流水线状态查询工具: out_dir={out_dir}")
        return report_tools.getPipelineStatus(out_dir)

    logger.info("MCP工具注册完成: describeSkeleton, getExperimentReport, getLatentDistances, "
                "evaluateStage, getPipelineStatus")


def _run_arguments(config):
    """mcp.run 的参数; stdio 不需要地址"""
    if config['transport'] == 'stdio':
        return {}
    path = config['sse_path'] if config['transport'] == 'sse' else config['path']
    transport = 'http' if config['transport'] == 'streamable-http' else config['transport']
    return {'transport': transport, 'host': config['host'], 'port': config['port'], 'path': path}


def run_server():
    """Configure logging, register the tools and serve on the configured transport."""
    import logging
    logger = logging.getLogger(__name__)

    try:
        config = get_transport_config()
        debug_mode = os.getenv('RELPOSE_DEBUG', 'false').lower() in ('true', '1', 'yes')
        setup_logging(debug_mode)
        logger.info(f"Relational Pose Adaptation Server 启动中: {config}")
        register_tools()
        mcp.run(**_run_arguments(config))
    except KeyboardInterrupt:
        logger.info("用户中断，正在关闭 Relational Pose Adaptation Server...")
    except Exception as e:
        logger.error(f"服务器启动失败: {e}", exc_info=True)
        sys.exit(1)


def main():
    """Main entry point for the server."""
    try:
        run_server()
    except Exception as e:
        print(f"Fatal error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
