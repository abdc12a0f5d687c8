"""factscale: evaluation and inference-orchestration toolkit for factual
test-time scaling of language models.

The core package is wrapped by a FastAPI service (``factscale.service``);
the ``factscale`` CLI is a thin client for that service.
"""

__version__ = "0.1.0"
