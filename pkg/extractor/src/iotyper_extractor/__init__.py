"""Labeled-dataset extraction for the type prediction pipeline: AST
emission, instrumentation, isolated execution, and dataset assembly."""

from .astjson import emit_ast, emit_ast_tree
from .build import ExtractionJob, build_dataset, extract_file, write_dataset
from .instrument import instrument, instrument_tree
from .runner import RunResult, run_file

__version__ = "0.1.0"
