import os


def get_self_path():
    # 仓库根目录
    return os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def get_output_dir(override: str | None = None) -> str:
    """输出目录：命令行参数 > 环境变量 > 默认值"""
    if override:
        return os.path.abspath(override)
    return os.path.abspath(os.environ.get(OUTPUT_DIR_ENV, DEFAULT_OUTPUT_DIR))


CURRENT_DIR = get_self_path()
PRESET_FILE = "data.json"
ENTROPY_LAB_VERSION = "v0.3.0"

OUTPUT_DIR_ENV = "ENTROPY_LAB_OUT"
WORKERS_ENV = "ENTROPY_LAB_WORKERS"
DEFAULT_OUTPUT_DIR = "outputs"
