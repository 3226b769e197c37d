from __future__ import annotations

import logging
from typing import List


logger = logging.getLogger("dops")


class LoggingAgent:
    """
    Mixin for agents that keep their own log lines.

    Every message goes to the shared "dops" logger and is also kept on the
    agent so results can carry the lines back to the caller (the CLI and
    the orchestrator print them as a run summary).
    """

    logs: List[str]

    def log(self, msg: str) -> None:
        if not hasattr(self, "logs") or self.logs is None:
            self.logs = []
        logger.info("[%s] %s", type(self).__name__, msg)
        self.logs.append(msg)
