import json
import logging
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from .config import DEFAULT_OUTPUT_DIR, TOOL_VERSION

logger = logging.getLogger(__name__)


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays, tuples and non-finite floats into plain JSON values"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def dumps(document: Dict) -> str:
    return json.dumps(to_jsonable(document), sort_keys=True, indent=2, allow_nan=False) + '\n'


@dataclass
class RunManifest:
    subcommand: str
    inputs: List[str]
    resolved: Dict
    seed: Optional[int] = None
    outputs: List[str] = field(default_factory=list)
    started_at: str = ''
    finished_at: str = ''
    tool_version: str = TOOL_VERSION

    def to_dict(self) -> Dict:
        return {
            'subcommand': self.subcommand,
            'inputs': list(self.inputs),
            'resolved': self.resolved,
            'seed': self.seed,
            'outputs': list(self.outputs),
            'started_at': self.started_at,
            'finished_at': self.finished_at,
            'tool_version': self.tool_version,
        }


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')


class ReportGenerator:
    """Writes a run's JSON reports and CSV plot data, then the manifest listing them"""

    def __init__(self, output_dir: Optional[str] = None):
        self.output_dir = output_dir or DEFAULT_OUTPUT_DIR
        os.makedirs(self.output_dir, exist_ok=True)
        self.outputs: List[str] = []

    def _path(self, relative: str) -> str:
        path = os.path.join(self.output_dir, relative)
        os.makedirs(os.path.dirname(path), exist_ok=True)
        return path

    def _record(self, relative: str) -> None:
        if relative not in self.outputs:
            self.outputs.append(relative)

    def write_json(self, relative: str, document: Dict) -> str:
        """
        Write a deterministic JSON report
        Args:
            relative: File name under the output directory
            document: Report content
        Returns:
            Path of the written file
        """
        path = self._path(relative)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(dumps(document))
        self._record(relative)
        logger.info(f"Wrote {path}")
        return path

    def write_csv(self, relative: str, frame: pd.DataFrame) -> str:
        path = self._path(relative)
        frame.to_csv(path, index=False, lineterminator='\n', float_format='%.10g')
        self._record(relative)
        logger.info(f"Wrote {path}")
        return path

    def write_text(self, relative: str, text: str) -> str:
        path = self._path(relative)
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
        self._record(relative)
        logger.info(f"Wrote {path}")
        return path

    def write_manifest(self, manifest: RunManifest) -> str:
        """Written last; lists every file produced before it"""
        manifest.outputs = list(self.outputs)
        manifest.finished_at = utc_now()
        path = self._path('manifest.json')
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(dumps(manifest.to_dict()))
        logger.info(f"Wrote {path} ({len(manifest.outputs)} outputs)")
        return path
