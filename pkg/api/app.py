import uuid
import json
import logging
import math
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from fastapi import FastAPI, UploadFile, File, Form, BackgroundTasks, HTTPException
from fastapi.responses import FileResponse
from fastapi.middleware.cors import CORSMiddleware

import sys
project_root = Path(__file__).parent.parent
sys.path.append(str(project_root))

from fklab import settings
from fklab.config import EXPERIMENTS, apply_overrides, parse_config
from fklab.experiments import run_experiment
from fklab.report import RunWorkbook

logger = logging.getLogger(__name__)

app = FastAPI(title="Feynman-Kac Laboratory API")

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_methods=["*"],
    allow_headers=["*"],
)

UPLOAD_DIR = project_root / "uploads"
OUTPUT_DIR = project_root / "output" / "jobs"
JOBS_FILE = project_root / "jobs.json"

MEDIA_TYPES = {
    ".csv": "text/csv",
    ".json": "application/json",
    ".env": "text/plain",
    ".xlsx": "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet",
}

# job table, mirrored to JOBS_FILE after every change
jobs: Dict[str, Dict] = {}


def load_jobs():
    global jobs
    if JOBS_FILE.exists():
        try:
            with open(JOBS_FILE, "r") as f:
                jobs = json.load(f)
                logger.info("Loaded %d jobs from storage.", len(jobs))
        except (OSError, ValueError) as e:
            logger.error("Error loading jobs: %s", e)
            jobs = {}


def save_jobs():
    try:
        with open(JOBS_FILE, "w") as f:
            json.dump(jobs, f, indent=2, default=str)
    except OSError as e:
        logger.error("Error saving jobs: %s", e)


load_jobs()


def json_safe(value):
    """JSON responses reject NaN and inf; those become null."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(v) for v in value]
    return value


def run_experiment_task(job_id: str, config_text: str, overrides: List[str]):
    """Background task running one experiment and its workbook export"""
    try:
        jobs[job_id]["status"] = "processing"
        jobs[job_id]["step"] = "validating_config"
        save_jobs()

        out_dir = OUTPUT_DIR / job_id
        config = parse_config(config_text)
        config = apply_overrides(config, list(overrides) + [f"output={out_dir}"])
        jobs[job_id]["experiment"] = config.experiment

        jobs[job_id]["step"] = "sampling"
        save_jobs()
        record = run_experiment(config)

        jobs[job_id]["step"] = "generating_report"
        save_jobs()
        workbook = RunWorkbook(title=f"Feynman-Kac run: {config.experiment}")
        workbook.add_run(record)
        workbook.save(out_dir / "report.xlsx")

        jobs[job_id]["status"] = "completed"
        jobs[job_id]["step"] = "done"
        jobs[job_id]["files"] = sorted(p.name for p in out_dir.iterdir() if p.is_file())
        jobs[job_id]["summary"] = json_safe(record.summary)
        jobs[job_id]["wall_time"] = record.wall_time
        save_jobs()

    except Exception as e:
        jobs[job_id]["status"] = "failed"
        jobs[job_id]["error"] = str(e)
        save_jobs()
        logger.error("Error processing job %s: %s", job_id, e)


@app.post("/experiments")
async def submit_experiment(
    background_tasks: BackgroundTasks,
    config: UploadFile = File(...),
    overrides: Optional[str] = Form(None),
):
    """
    Queue an experiment. `config` is a key=value file; `overrides` is an
    optional newline- or semicolon-separated list of key=value pairs.
    """
    job_id = str(uuid.uuid4())
    UPLOAD_DIR.mkdir(parents=True, exist_ok=True)
    raw = await config.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError:
        raise HTTPException(status_code=400, detail="config must be UTF-8 text")

    config_path = UPLOAD_DIR / f"{job_id}_{Path(config.filename or 'config.env').name}"
    config_path.write_text(text)

    items = [item.strip() for item in (overrides or "").replace(";", "\n").splitlines() if item.strip()]

    jobs[job_id] = {
        "id": job_id,
        "status": "queued",
        "filename": config.filename,
        "overrides": items,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    save_jobs()

    background_tasks.add_task(run_experiment_task, job_id, text, items)
    return {"job_id": job_id, "status": "queued"}


@app.get("/status/{job_id}")
async def get_status(job_id: str):
    """Job record: status, current step, output files and summary"""
    if job_id not in jobs:
        raise HTTPException(status_code=404, detail="Job not found")
    return jobs[job_id]


@app.get("/download/{job_id}/{filename}")
async def download_file(job_id: str, filename: str):
    """Download one output file of a finished job"""
    if job_id not in jobs:
        raise HTTPException(status_code=404, detail="Job not found")
    file_path = OUTPUT_DIR / job_id / Path(filename).name
    if not file_path.is_file():
        raise HTTPException(status_code=404, detail="File not found")
    return FileResponse(
        path=file_path,
        filename=file_path.name,
        media_type=MEDIA_TYPES.get(file_path.suffix, "application/octet-stream"),
    )


@app.get("/")
async def home():
    """Service description"""
    return {"service": app.title, "experiments": list(EXPERIMENTS)}


if __name__ == "__main__":
    import uvicorn
    uvicorn.run(app, host="0.0.0.0", port=settings.PORT)
