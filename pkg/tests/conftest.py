import json

import pytest
from hypothesis import HealthCheck, settings

from ngrec.domain import BoundingBox, DetectionInstance

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def box(x, y, w, h):
    return BoundingBox(float(x), float(y), float(w), float(h))


def det(x, y, w, h, score=1.0, category=None):
    return DetectionInstance(box(x, y, w, h), category, score)


@pytest.fixture
def write_json(tmp_path):
    def _write(name, obj):
        p = tmp_path / name
        p.write_text(json.dumps(obj), encoding="utf-8")
        return p

    return _write


@pytest.fixture
def write_lines(tmp_path):
    def _write(name, objs):
        p = tmp_path / name
        p.write_text("".join(json.dumps(o) + "\n" for o in objs), encoding="utf-8")
        return p

    return _write
