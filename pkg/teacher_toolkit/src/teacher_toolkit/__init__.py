"""Teacher toolkit: fine-tune a transformer for joint intent/slot parsing
and export its logits in the JSONL format the student pipeline consumes.

The handoff to the student is file-only: dataset TSVs, a schema JSON, and
teacher-logit JSONL records.
"""

__version__ = "0.1.0"
