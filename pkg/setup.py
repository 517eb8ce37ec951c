"""Setup script for keyreg."""

from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = [line.split("#", 1)[0].strip() for line in fh if line.split("#", 1)[0].strip()]

setup(
    name="keyreg",
    version="1.0.0",
    description="Resolution-agnostic keypoint registration of medical volumes in world coordinates",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "api",
        "coords",
        "errors",
        "keypoints",
        "main",
        "metrics",
        "objective",
        "orchestrator",
        "phantom",
        "solvers",
        "volio",
        "warp",
        "worker_pool",
    ],
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "Topic :: Scientific/Engineering :: Image Processing",
    ],
    python_requires=">=3.10",
    install_requires=requirements,
    extras_require={
        "dev": [
            "pytest>=7.0.0",
            "pytest-cov>=4.0.0",
            "ruff>=0.1.0",
            "mypy>=1.0.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "keyreg=main:main",
        ],
    },
    keywords="registration, medical imaging, keypoints, thin-plate spline, nifti",
)
