"""Router configuration.

This module sets up the routing for the API version. Every route is a thin
wrapper over ``ProblemService``, the same service the ``dgmp`` command uses, so
a problem posted here gives the numbers the command line writes to disk.

To add a new router, import it and include it in ``api_version_one``:

Example:
    from dgmp.v1.routes.new_module import new_router

    api_version_one.include_router(new_router)

Usage:
    This configuration is included in the `main.py` application router to
    make the API version endpoints available.
"""

from fastapi import APIRouter

from dgmp.v1.routes.problems import problems

api_version_one = APIRouter(prefix="/api/v1")

api_version_one.include_router(problems)
