"""Export patch-grid and prompt embeddings from a pretrained vision-language model."""

from .export import ConfigError, ExportError, ExportJob, run_export
from .tmeb import write_embeddings

__all__ = ["ConfigError", "ExportError", "ExportJob", "run_export", "write_embeddings"]
