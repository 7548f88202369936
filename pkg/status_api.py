"""Read-only HTTP view of a running emulator."""
import logging
from typing import Any, Dict, List, Optional

import uvicorn
from fastapi import FastAPI, HTTPException

from error_handlers import handle_api_error
from models import OpSummary, OpTrace

logger = logging.getLogger(__name__)


def create_app(server: Any) -> FastAPI:
    """
    Build the status app for an emulator server.

    Args:
        server: An EmulatorServer (anything exposing `controller`, `served`,
            `real_rank`, `sessions_served` and `active`)

    Returns:
        FastAPI: The application; the server is kept on `app.state.emulator`
    """
    app = FastAPI(title="Collective emulator status")
    app.state.emulator = server

    @app.get("/health")
    async def health() -> Dict[str, Any]:
        emulator = app.state.emulator
        return {
            "status": "healthy",
            "real_rank": emulator.real_rank,
            "emulated_ranks": list(emulator.served),
            "session_active": emulator.active,
            "sessions_served": emulator.sessions_served,
            "live_operations": len(emulator.controller),
            "completed_operations": emulator.controller.completed,
        }

    @app.get("/operations", response_model=List[OpSummary])
    async def operations() -> List[OpSummary]:
        return app.state.emulator.controller.summaries()

    @app.get("/operations/{op_id}", response_model=OpSummary)
    async def operation(op_id: int) -> OpSummary:
        try:
            return app.state.emulator.controller.get(op_id).summary()
        except HTTPException:
            raise
        except Exception as e:
            raise handle_api_error(e)

    @app.get("/traces", response_model=List[OpTrace])
    async def traces(limit: Optional[int] = None) -> List[OpTrace]:
        retained = list(app.state.emulator.controller.traces)
        if limit is not None:
            if limit < 0:
                raise HTTPException(status_code=400, detail="limit must be ≥ 0")
            retained = retained[-limit:] if limit else []
        return retained

    return app


def status_server(server: Any, host: str, port: int) -> uvicorn.Server:
    """Uvicorn server for the status app, to be served inside the emulator's event loop."""
    config = uvicorn.Config(create_app(server), host=host, port=port, log_level="warning", lifespan="off")
    logger.info(f"Status API on http://{host}:{port}")
    return uvicorn.Server(config)
