"""Tests for configuration loading and error reporting"""
import json
import logging

import pytest

from src import config
from src.config import SampleConfig, TrainConfig, load_train_config, merge_overrides, save_config
from src.error_handler import (ConfigurationError, DatasetFormatError, ErrorCategory, ErrorReporter,
                               TrainingDivergence)
from src.utils import RunManifest, content_checksum, median_iqr, write_csv


def test_defaults_without_a_file(monkeypatch, tmp_path):
    monkeypatch.setattr(config, 'CONFIG_FILE', str(tmp_path / 'absent.json'))
    assert load_train_config() == TrainConfig()


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.flow_ratio, cfg.gamma, cfg.chunk_h) == (0.2, 0.5, 20)
    assert cfg.z_dim == 60


def test_unknown_keys_are_listed(tmp_path):
    path = tmp_path / 'cfg.json'
    path.write_text(json.dumps({'steps': 10, 'flowratio': 0.3, 'colour': 'red'}))
    with pytest.raises(ConfigurationError) as err:
        load_train_config(str(path))
    assert err.value.error_type == 'unknown_key'
    assert 'colour' in str(err.value) and 'flowratio' in str(err.value)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigurationError) as missing:
        load_train_config(str(tmp_path / 'nope.json'))
    assert missing.value.error_type == 'missing'
    broken = tmp_path / 'broken.json'
    broken.write_text('{')
    with pytest.raises(ConfigurationError):
        load_train_config(str(broken))


def test_save_load_round_trip(tmp_path):
    cfg = TrainConfig(gamma=0.3, hidden_dims=[32, 16])
    path = save_config(cfg, str(tmp_path / 'sub' / 'cfg.json'))
    assert load_train_config(path) == cfg


def test_validation_collects_every_problem():
    problems = TrainConfig(flow_ratio=2.0, gamma=0.0, time_embed_dim=3).problems()
    assert len(problems) == 3
    with pytest.raises(ConfigurationError):
        TrainConfig(adaptive_c=0.0).validate()
    with pytest.raises(ConfigurationError):
        SampleConfig(nfe=0).validate()


def test_merge_overrides():
    cfg = merge_overrides(TrainConfig(), {'gamma': None, 'steps': 7})
    assert cfg.steps == 7 and cfg.gamma == 0.5
    with pytest.raises(ConfigurationError):
        merge_overrides(TrainConfig(), {'gamma': 3.0})
    with pytest.raises(ConfigurationError):
        merge_overrides(TrainConfig(), {'momentum': 0.9})


@pytest.mark.parametrize('data', [
    {'steps': '5'},
    {'learn_rate': 'fast'},
    {'normalize': 1},
    {'batch_size': True},
    {'steps': 5.5},
    {'hidden_dims': [64, '64']},
    {'hidden_dims': 64},
    {'activation': 3},
])
def test_wrong_json_types_are_configuration_errors(tmp_path, data):
    path = tmp_path / 'cfg.json'
    path.write_text(json.dumps(data))
    with pytest.raises(ConfigurationError) as err:
        load_train_config(str(path))
    assert err.value.error_type == 'invalid_type'
    assert next(iter(data)) in str(err.value)


def test_integers_are_accepted_for_float_fields(tmp_path):
    path = tmp_path / 'cfg.json'
    path.write_text(json.dumps({'gamma': 1, 'learn_rate': 0}))
    cfg = load_train_config(str(path))
    assert (cfg.gamma, cfg.learn_rate) == (1, 0)


def test_merge_overrides_checks_types():
    with pytest.raises(ConfigurationError) as err:
        merge_overrides(TrainConfig(), {'steps': '7'})
    assert err.value.error_type == 'invalid_type'


def test_invalid_type_has_a_solution(tmp_path):
    reporter = ErrorReporter(log_file_path=str(tmp_path / 'errors.log'))
    message = reporter.report_error(ConfigurationError("wrong type for steps='5'", "invalid_type"),
                                    show_console=False)
    assert 'Solution' in message and 'without quotes' in message


def test_error_categories():
    assert TrainingDivergence(12, float('nan')).category == ErrorCategory.DIVERGENCE
    err = DatasetFormatError("bad", line_no=4)
    assert str(err).startswith('line 4') and err.line_no == 4


def test_reporter_friendly_message_and_stats(tmp_path, capsys):
    reporter = ErrorReporter(log_file_path=str(tmp_path / 'errors.log'))
    message = reporter.report_error(ConfigurationError("unknown config key(s): colour", "unknown_key"))
    assert 'Solution' in message and 'colour' in message
    assert 'ERROR (configuration)' in capsys.readouterr().err
    reporter.report_error(TrainingDivergence(3, float('inf')), show_console=False)
    assert reporter.get_error_stats() == {'configuration': 1, 'training_divergence': 1}
    exported = reporter.export_error_log(str(tmp_path / 'export.json'))
    assert len(json.loads(open(exported).read())) == 2
    reporter.clear_error_log()
    assert reporter.get_error_stats() == {}


def test_audit_entries_reach_the_log_file(tmp_path):
    path = tmp_path / 'audit.log'
    reporter = ErrorReporter(log_file_path=str(path))
    reporter.log_audit('checkpoint_written', {'path': 'x'})
    for handler in reporter.logger.handlers:
        handler.flush()
    assert 'AUDIT: checkpoint_written' in path.read_text()


def test_setup_logging_uses_the_given_file(tmp_path):
    path = tmp_path / 'logs' / 'app.log'
    config.setup_logging(debug=True, log_file=str(path))
    logging.getLogger('src.test').debug('hello')
    assert path.exists()
    assert logging.getLogger().level == logging.DEBUG


def test_timing_columns_do_not_change_checksums(tmp_path):
    a = write_csv(str(tmp_path / 'a.csv'), ['x', 'gen_time_s'], [(1, 0.5)])
    b = write_csv(str(tmp_path / 'b.csv'), ['x', 'gen_time_s'], [(1, 0.9)])
    c = write_csv(str(tmp_path / 'c.csv'), ['x', 'gen_time_s'], [(2, 0.5)])
    assert content_checksum(a) == content_checksum(b) != content_checksum(c)


def test_manifest_compare(tmp_path):
    path = write_csv(str(tmp_path / 'r.csv'), ['x'], [(1,)])
    first = RunManifest('eval', [], {}, 0)
    first.add_artifact('report', path)
    first.write(str(tmp_path))
    second = RunManifest.load(str(tmp_path))
    assert first.compare(second) == []
    second.checksums['report'] = 'different'
    assert first.compare(second) == ['report']


def test_median_iqr_ignores_missing():
    stats = median_iqr([1.0, None, 3.0, float('nan'), 2.0, 4.0])
    assert stats == {'median': 2.5, 'iqr': 1.5, 'n': 4}
