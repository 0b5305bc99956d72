"""gridling: a small multi-user GPU batch-workload manager."""

from gridling.errors import GridlingError
from gridling.jobspec import JobRequest, parse_job_file, render_job_file

__version__ = "0.1.0"

__all__ = ["GridlingError", "JobRequest", "parse_job_file", "render_job_file"]
