import logging
import time
from contextlib import contextmanager

COMPONENTS = ("scene_forge", "diffusion", "fusion", "reward", "trainer", "metrics", "cli")


class GlobalIndent:
    """Process-wide nesting state shared by every IndentLogger"""

    _level = 0
    _open = set()
    _phase_levels = set()
    _glyphs = {"pipe": "│", "branch": "├──", "leaf": "└──"}
    _phase_glyphs = {"pipe": "║", "branch": "║──", "leaf": "╚══"}

    @classmethod
    def enter(cls, phase: bool = False) -> None:
        cls._open.add(cls._level)
        if phase:
            cls._phase_levels.add(cls._level)
        cls._level += 1

    @classmethod
    def leave(cls) -> None:
        if cls._level == 0:
            return
        cls._level -= 1
        cls._open.discard(cls._level)
        cls._phase_levels.discard(cls._level)

    @classmethod
    def prefix(cls) -> str:
        if cls._level == 0:
            return ""
        parts = []
        for depth in range(cls._level - 1):
            glyphs = cls._phase_glyphs if depth in cls._phase_levels else cls._glyphs
            parts.append(f"{glyphs['pipe']}   " if depth in cls._open else "    ")
        last = cls._level - 1
        glyphs = cls._phase_glyphs if last in cls._phase_levels else cls._glyphs
        parts.append(glyphs["branch"] if last in cls._open else glyphs["leaf"])
        return "".join(parts)


class IndentLogger:
    """Logger wrapper that prefixes messages with the current pipeline nesting"""

    def __init__(self, logger: logging.Logger) -> None:
        self._logger = logger

    def debug(self, msg: str, *args, **kwargs) -> None:
        self._logger.debug(f"{GlobalIndent.prefix()}{msg}", *args, **kwargs)

    def info(self, msg: str, *args, **kwargs) -> None:
        self._logger.info(f"{GlobalIndent.prefix()}{msg}", *args, **kwargs)

    def warning(self, msg: str, *args, **kwargs) -> None:
        self._logger.warning(f"{GlobalIndent.prefix()}{msg}", *args, **kwargs)

    def error(self, msg: str, *args, **kwargs) -> None:
        self._logger.error(f"{GlobalIndent.prefix()}{msg}", *args, **kwargs)

    def is_debug(self) -> bool:
        return self._logger.isEnabledFor(logging.DEBUG)

    @contextmanager
    def indent_block(self, title: str | None = None, phase: bool = False, timed: bool = False):
        """Nest all log lines emitted inside the block; optionally report elapsed time on exit"""
        if title and phase:
            self.info(title)
        elif title:
            self.debug(title)
        started = time.perf_counter()
        GlobalIndent.enter(phase)
        try:
            yield
        finally:
            GlobalIndent.leave()
            if timed:
                self.info(f"{title or 'block'} finished in {time.perf_counter() - started:.1f}s")


def configure_logging(level: str | None = None) -> dict[str, logging.Logger]:
    """Attach one console handler to every component logger"""
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter("%(levelname)8s %(message)s"))

    log_level = getattr(logging, (level or "INFO").upper())
    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)

    loggers = {name: logging.getLogger(name) for name in COMPONENTS}
    for logger in loggers.values():
        logger.setLevel(log_level)
        logger.propagate = False
        logger.handlers.clear()
        logger.addHandler(handler)

    return loggers
