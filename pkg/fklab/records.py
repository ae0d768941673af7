"""
Run records
Long-format result tables written as CSV with a JSON metadata sidecar, and
reloading of a finished run so it can be re-executed from its own config.
"""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import pandas as pd

from fklab import settings
from fklab.config import ExperimentConfig, parse_config, serialize_config

logger = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "experiment", "quantity", "param", "param_value",
    "value", "stderr", "n_samples", "ci95_low", "ci95_high",
]
RESULTS_FILE = "results.csv"
METADATA_FILE = "metadata.json"
CONFIG_FILE = "config.env"


def result_row(
    experiment: str,
    quantity: str,
    value: float,
    param: str = "",
    param_value: float = math.nan,
    stderr: float = math.nan,
    n_samples: int = 0,
    ci: Optional[Tuple[float, float]] = None,
) -> Dict[str, Any]:
    """
    One estimate per row. The interval is value ± 1.96·stderr unless a
    fitted interval is passed in `ci`.
    """
    if ci is not None:
        low, high = ci
    elif math.isfinite(stderr):
        low, high = value - 1.96 * stderr, value + 1.96 * stderr
    else:
        low, high = math.nan, math.nan
    return {
        "experiment": experiment,
        "quantity": quantity,
        "param": param,
        "param_value": float(param_value),
        "value": float(value),
        "stderr": float(stderr),
        "n_samples": int(n_samples),
        "ci95_low": float(low),
        "ci95_high": float(high),
    }


def results_frame(rows: List[Dict[str, Any]]) -> pd.DataFrame:
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)


@dataclass
class RunRecord:
    config: ExperimentConfig
    results: pd.DataFrame
    wall_time: float
    provenance: Dict[str, Any]
    version: str = settings.ARTIFACT_VERSION
    summary: Dict[str, Any] = field(default_factory=dict)
    files: Dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: Optional[Union[str, Path]] = None) -> Dict[str, str]:
        """results.csv, metadata.json and config.env under out_dir."""
        out = Path(out_dir or self.config.output)
        try:
            out.mkdir(parents=True, exist_ok=True)
            csv_path = out / RESULTS_FILE
            self.results.to_csv(csv_path, index=False)
            config_path = out / CONFIG_FILE
            config_path.write_text(serialize_config(self.config))
            meta_path = out / METADATA_FILE
            with open(meta_path, "w") as f:
                json.dump(self.metadata(), f, indent=2, default=str)
        except OSError as exc:
            raise OSError(f"cannot write run record to {out}: {exc}") from exc
        self.files.update(results=str(csv_path), metadata=str(meta_path), config=str(config_path))
        return dict(self.files)

    def metadata(self) -> Dict[str, Any]:
        return {
            "experiment": self.config.experiment,
            "version": self.version,
            "wall_time_seconds": self.wall_time,
            "provenance": self.provenance,
            "summary": self.summary,
            "config": serialize_config(self.config),
            "columns": list(self.results.columns),
        }

    @classmethod
    def load(cls, out_dir: Union[str, Path]) -> "RunRecord":
        out = Path(out_dir)
        try:
            with open(out / METADATA_FILE) as f:
                meta = json.load(f)
            results = pd.read_csv(out / RESULTS_FILE)
        except OSError as exc:
            raise OSError(f"cannot load run record from {out}: {exc}") from exc
        results["param"] = results["param"].fillna("")
        return cls(
            config=parse_config(meta["config"]),
            results=results,
            wall_time=float(meta["wall_time_seconds"]),
            provenance=meta["provenance"],
            version=meta["version"],
            summary=meta.get("summary", {}),
        )

    def rerun(self, out_dir: Optional[Union[str, Path]] = None) -> "RunRecord":
        """Execute the embedded config again."""
        from fklab.experiments import run_experiment

        config = self.config
        if out_dir is not None:
            config = replace(config, output=str(out_dir))
        return run_experiment(config)
