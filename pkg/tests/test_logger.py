"""Tests for RunLogger - JSON lines, rotation and tail."""

import json

import pytest

from morphxai.logger import RunLogger


@pytest.fixture
def log_path(tmp_path):
    return tmp_path / "run" / "train.log"


def make_record(step=0, event="step"):
    return {"event": event, "step": step, "loss/total": 1.0 / (step + 1), "lambda": 0.5}


class TestLogger:
    def test_log_creates_file(self, log_path):
        logger = RunLogger(log_path)
        logger.log(make_record())
        assert log_path.exists()

    def test_log_writes_json_lines(self, log_path):
        logger = RunLogger(log_path)
        logger.log(make_record(step=0))
        logger.log(make_record(step=1, event="eval"))
        lines = log_path.read_text().splitlines()
        assert len(lines) == 2
        assert json.loads(lines[0])["event"] == "step"
        assert json.loads(lines[1])["event"] == "eval"

    def test_keys_sorted(self, log_path):
        logger = RunLogger(log_path)
        logger.log({"b": 1, "a": 2})
        assert log_path.read_text() == '{"a": 2, "b": 1}\n'

    def test_tail_returns_last_n(self, log_path):
        logger = RunLogger(log_path)
        for i in range(5):
            logger.log(make_record(step=i))
        tail = logger.tail(3)
        assert len(tail) == 3
        assert tail[-1]["step"] == 4

    def test_tail_zero_returns_all(self, log_path):
        logger = RunLogger(log_path)
        for i in range(4):
            logger.log(make_record(step=i))
        assert len(logger.tail(0)) == 4

    def test_tail_empty_file(self, log_path):
        assert RunLogger(log_path).tail(10) == []

    def test_tail_skips_garbage(self, log_path):
        logger = RunLogger(log_path)
        logger.log(make_record())
        with open(log_path, "a") as f:
            f.write("not json\n")
        assert len(logger.tail(10)) == 1

    def test_read_filters_by_event(self, log_path):
        logger = RunLogger(log_path)
        logger.log(make_record(step=0))
        logger.log(make_record(step=1, event="eval"))
        logger.log(make_record(step=2))
        assert [r["step"] for r in logger.read("step")] == [0, 2]
        assert len(logger.read()) == 3

    def test_rotation_keeps_max_lines(self, log_path):
        logger = RunLogger(log_path, max_log_lines=10)
        for i in range(15):
            logger.log(make_record(step=i))
        lines = log_path.read_text().splitlines()
        assert len(lines) == 10
        assert json.loads(lines[0])["step"] == 5

    def test_no_rotation_by_default(self, log_path):
        logger = RunLogger(log_path)
        for i in range(30):
            logger.log(make_record(step=i))
        assert len(log_path.read_text().splitlines()) == 30

    def test_reset(self, log_path):
        logger = RunLogger(log_path)
        logger.log(make_record())
        logger.reset()
        assert not log_path.exists()
        logger.reset()

    def test_disabled_logging_no_file(self, log_path):
        logger = RunLogger(log_path, enabled=False)
        logger.log(make_record())
        assert not log_path.exists()
