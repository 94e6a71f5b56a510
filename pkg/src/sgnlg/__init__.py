"""Schema-guided template generation toolkit."""
from importlib import resources

from .schema import (MRTriple, SchemaInstance, SGNLGRecord, SlotDescription, Template, explicit_slots,
                     load_records, save_records, validate_record)

__version__ = "0.1.0"


def fixture_dir() -> str:
    """Bundled DSTC8-shaped miniature corpus (train/ and dev/ splits)."""
    return str(resources.files(__package__) / "data" / "fixture")


def memorize_fixture() -> str:
    """Path to the 10-instance overfit fixture (SGNLGRecord JSONL)."""
    return str(resources.files(__package__) / "data" / "memorize10.jsonl")


__all__ = ["MRTriple", "SchemaInstance", "SGNLGRecord", "SlotDescription", "Template", "explicit_slots",
           "load_records", "save_records", "validate_record", "fixture_dir", "memorize_fixture", "__version__"]
