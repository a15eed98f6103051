import numpy as np


def make_generator(seed: int, *stream: int) -> np.random.Generator:
    """基于 Philox（计数器型）的确定性随机数生成器，stream 用于派生独立子流"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


def parse_scalar(text: str):
    """把命令行里的字符串值解析为 bool/int/float，失败时原样返回"""
    lowered = text.strip().lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text
