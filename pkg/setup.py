from setuptools import find_packages, setup

setup(
    name="dgmp",
    version="0.1.0",
    description="Discrete-time geometric optimal control on manifolds",
    python_requires=">=3.10",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "fastapi==0.111.1",
        "numpy==1.26.4",
        "pydantic-settings==2.3.4",
        "scipy==1.13.1",
    ],
    entry_points={"console_scripts": ["dgmp=dgmp.cli:main"]},
)
