import os

import pytest

from sgnlg import fixture_dir
from sgnlg.preprocess import attach_schema_info, load_schema_file
from sgnlg.schema import MRTriple, SGNLGRecord

CUISINE_UTTERANCE = "Is there a specific cuisine type you enjoy, such as Mexican, Italian, or something else?"
CUISINE_TEMPLATE = "Is there a specific cuisine type you enjoy, such as $cuisine_1, $cuisine_2, or something else?"


@pytest.fixture(scope="session")
def schemas():
    return load_schema_file(os.path.join(fixture_dir(), "train", "schema.json"))


@pytest.fixture
def cuisine_record(schemas):
    mr = [MRTriple("REQUEST", "cuisine", "$cuisine_1"), MRTriple("REQUEST", "cuisine", "$cuisine_2")]
    return SGNLGRecord(attach_schema_info(mr, "Restaurants_1", "FindRestaurants", schemas), [CUISINE_TEMPLATE])
