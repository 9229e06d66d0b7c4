from __future__ import annotations

import dataclasses as dc
import logging
import threading
from pathlib import Path
from typing import Callable, List, Optional, Tuple

from .utils import ensure_dir


@dc.dataclass
class Artifact:
    path: Path
    write: Callable[[Path], None]
    label: str = ""


class ArtifactSaver:
    """Writes stage artifacts on a background thread, in submission order."""

    def __init__(self) -> None:
        self.queue: List[Artifact] = []
        self.lock = threading.Lock()
        self.cv = threading.Condition(self.lock)
        self.stop_flag = False
        self.pending = 0
        self.failures: List[Tuple[Path, str]] = []
        self.thread = threading.Thread(target=self._run, name="artifact_saver", daemon=True)
        self.thread.start()

    def submit(self, path: Path, write: Callable[[Path], None], label: str = "") -> None:
        with self.cv:
            if self.stop_flag:
                raise RuntimeError("artifact saver is stopped")
            self.queue.append(Artifact(Path(path), write, label or Path(path).name))
            self.pending += 1
            self.cv.notify_all()

    def submit_text(self, path: Path, text: str) -> None:
        self.submit(path, lambda p: p.write_text(text, encoding="utf-8"))

    def flush(self, timeout: Optional[float] = None) -> List[Tuple[Path, str]]:
        """Block until every submitted artifact is written; returns and clears failures."""
        with self.cv:
            self.cv.wait_for(lambda: self.pending == 0, timeout=timeout)
            failures, self.failures = self.failures, []
        return failures

    def stop(self) -> None:
        with self.cv:
            self.stop_flag = True
            self.cv.notify_all()
        self.thread.join(timeout=5.0)

    def _run(self) -> None:
        while True:
            with self.cv:
                while not self.queue and not self.stop_flag:
                    self.cv.wait(timeout=0.5)
                if self.stop_flag and not self.queue:
                    return
                art = self.queue.pop(0)
            try:
                ensure_dir(art.path.parent)
                art.write(art.path)
                logging.debug("Artifact saved: %s", art.path)
            except Exception as e:
                logging.exception("Artifact save failed: %s", art.label)
                with self.cv:
                    self.failures.append((art.path, str(e)))
            finally:
                with self.cv:
                    self.pending -= 1
                    self.cv.notify_all()
