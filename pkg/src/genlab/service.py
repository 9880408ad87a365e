"""HTTP service: submit an experiment configuration, get back its RunRecord."""
from __future__ import annotations

from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .harness import COMMANDS, DEFAULT_REPLICATES, DEFAULTS, ExperimentConfig, RunRecord, run_experiment


class CommandInfo(BaseModel):
    command: str
    replicates: int
    options: dict


class Health(BaseModel):
    status: str
    runs: int


def create_app(runs_dir: Optional[str | Path] = None) -> FastAPI:
    """Build the app; records are kept in memory and, with ``runs_dir``, saved there."""
    app = FastAPI(title="genlab", version="0.1.0")
    store: dict[str, RunRecord] = {}

    @app.get("/health", response_model=Health)
    def health() -> Health:
        return Health(status="ok", runs=len(store))

    @app.get("/commands", response_model=list[CommandInfo])
    def commands() -> list[CommandInfo]:
        return [CommandInfo(command=c, replicates=DEFAULT_REPLICATES[c], options=DEFAULTS[c]) for c in COMMANDS]

    @app.post("/runs", response_model=RunRecord)
    def submit(config: ExperimentConfig) -> RunRecord:
        try:
            record = run_experiment(config)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        store[record.hash] = record
        if runs_dir is not None:
            record.save(runs_dir)
        return record

    @app.get("/runs", response_model=list[str])
    def list_runs() -> list[str]:
        return sorted(store)

    @app.get("/runs/{run_hash}", response_model=RunRecord)
    def get_run(run_hash: str) -> RunRecord:
        hits = [h for h in store if h.startswith(run_hash)]
        if len(hits) != 1:
            raise HTTPException(status_code=404, detail="no unique run with that hash")
        return store[hits[0]]

    return app


app = create_app()
