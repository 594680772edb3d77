import logging
from contextlib import asynccontextmanager
from typing import AsyncIterator

import uvicorn
from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from starlette.requests import Request
from starlette.responses import JSONResponse

from dgmp import __version__
from dgmp.utils.logging_config import setup_logging
from dgmp.utils.settings import settings
from dgmp.v1.routes import api_version_one

setup_logging()
logger = logging.getLogger("dgmp")


@asynccontextmanager
async def lifespan(app: FastAPI) -> AsyncIterator[None]:
    logger.info("dgmp %s serving with %d sweep threads", __version__, settings.THREADS)
    yield


app = FastAPI(
    title="dgmp",
    description="Discrete geometric optimal control: rollouts, solves, "
    "necessary-condition checks, variational integration and value sweeps over HTTP.",
    version=__version__,
    lifespan=lifespan,
    license_info={
        "name": "MIT License",
        "url": "https://opensource.org/licenses/MIT",
    },
    docs_url="/docs",
    redoc_url="/redoc",
    openapi_url="/openapi.json",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=["POST", "GET"],
    allow_headers=["*"],
)

app.include_router(api_version_one)


@app.get("/", tags=["Home"], response_class=JSONResponse)
async def get_root(request: Request) -> JSONResponse:
    commands = [route.path for route in api_version_one.routes if hasattr(route, "path")]
    return JSONResponse(
        {
            "message": "dgmp: post a problem file to one of the commands",
            "version": __version__,
            "commands": sorted(commands),
            "URL": request.url._url,
        }
    )


if __name__ == "__main__":
    uvicorn.run("main:app", host=settings.HOST, port=settings.PORT, reload=True)
