import json
import logging
import os
import shutil

import pytest

from cli import build_parser, main, parse_data_inputs
from errors import ConfigError
from ingest import load_stop_file, write_stop_file
from logging_config import OWNED_ATTR
from model import _PREAMBLE, FORMAT_VERSION, MAGIC, load_checkpoint, read_checkpoint_header

TINY_MODEL = ['--layers', '1', '--d-model', '8', '--heads', '2', '--max-len', '8', '--batch-size', '2']


def read_json(path):
    with open(path, encoding='utf-8') as f:
        return json.load(f)


@pytest.fixture(autouse=True)
def reset_logging():
    """Drop the handlers main() installs so they do not outlive the captured streams."""
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        if getattr(handler, OWNED_ATTR, False):
            root.removeHandler(handler)
            handler.close()


@pytest.fixture
def synth_file(temp_dir):
    path = os.path.join(temp_dir, 'synthetic.jsonl')
    assert main(['synth', '-o', path, '--agents', '4', '--days', '3', '--seed', '2']) == 0
    return path


@pytest.fixture
def trained(synth_file, temp_dir):
    out = os.path.join(temp_dir, 'run')
    assert main(['pretrain', '--data', synth_file, '-o', out, '--steps', '2', '--split', 'all', *TINY_MODEL]) == 0
    return os.path.join(out, 'checkpoint.gmtm')


class TestParser:

    def test_subcommands(self):
        parser = build_parser()
        args = parser.parse_args(['eval', '--checkpoint', 'c.gmtm', '--data', 'd.jsonl', '--tasks', 'goal,id'])
        assert args.tasks == ['goal', 'id']
        assert args.seed is None

    def test_missing_subcommand(self):
        assert main([]) == 2


class TestSynth:
    """Test the synth subcommand."""

    def test_zero_agents(self, temp_dir):
        path = os.path.join(temp_dir, 'empty.jsonl')
        assert main(['synth', '-o', path, '--agents', '0']) == 0
        with open(path) as f:
            assert f.read() == ''
        manifest = read_json(path + '.manifest.json')
        assert manifest['subcommand'] == 'synth'
        assert manifest['config']['n_agents'] == 0

    def test_reruns_are_byte_identical(self, temp_dir):
        paths = [os.path.join(temp_dir, f"{k}.jsonl") for k in range(2)]
        for path in paths:
            assert main(['synth', '-o', path, '--agents', '3', '--days', '2', '--seed', '9', '--workers', '2']) == 0
        with open(paths[0], 'rb') as a, open(paths[1], 'rb') as b:
            assert a.read() == b.read()

    def test_missing_output(self, capsys):
        assert main(['synth', '--agents', '3']) == 2
        assert '--output' in capsys.readouterr().err

    @pytest.mark.parametrize('flags', [
        ['--profile', 'nightlife'],
        ['--agents', '-1'],
        ['--skip-prob', '2'],
        ['--noise', '-5'],
    ])
    def test_invalid_values_are_usage_errors(self, temp_dir, capsys, flags):
        out = os.path.join(temp_dir, 'x.jsonl')
        assert main(['synth', '-o', out, *flags]) == 2
        err = capsys.readouterr().err
        assert 'usage: ' in err
        assert 'error: ' in err
        assert not os.path.exists(out)

    def test_plots(self, temp_dir):
        plots = os.path.join(temp_dir, 'plots')
        assert main(['synth', '-o', os.path.join(temp_dir, 's.jsonl'), '--agents', '2', '--days', '2', '--plots', plots]) == 0
        assert os.path.exists(os.path.join(plots, 'class_distribution.png'))


class TestIngest:
    """Test the ingest subcommand."""

    def test_stop_file(self, synth_file, temp_dir):
        out = os.path.join(temp_dir, 'canonical.jsonl')
        assert main(['ingest', synth_file, '-o', out]) == 0
        assert load_stop_file(out).to_records() == load_stop_file(synth_file).to_records()
        meta = read_json(out + '.meta.json')
        assert meta['schema'] == 'stop'
        assert meta['vocab_fingerprint'] == load_stop_file(out).vocab.fingerprint()

    def test_pings_need_pois(self, records_file, temp_dir, capsys):
        pings = records_file('pings.jsonl', [{'agent_id': 'a', 'timestamp': 0, 'lat': 34.0, 'lon': -118.0}])
        assert main(['ingest', pings, '-o', os.path.join(temp_dir, 'out.jsonl')]) == 2
        assert '--pois' in capsys.readouterr().err

    def test_pings_with_pois(self, records_file, temp_dir):
        pings = records_file('pings.jsonl', [
            {'agent_id': 'a', 'timestamp': t, 'lat': 34.0, 'lon': -118.0} for t in range(0, 2401, 300)
        ])
        pois = records_file('pois.jsonl', [{'lat': 34.0, 'lon': -118.0, 'category': 'home'}])
        out = os.path.join(temp_dir, 'out.jsonl')
        assert main(['ingest', pings, '--pois', pois, '-o', out, '--workers', '2']) == 0
        dataset = load_stop_file(out)
        assert dataset.n_stops == 1
        assert dataset.vocab.categories == ('home',)
        assert read_json(out + '.manifest.json')['inputs']['pois'] == pois

    def test_mixed_schema(self, records_file, temp_dir, capsys):
        path = records_file('mixed.jsonl', [
            {'agent_id': 'a', 'category': 'home', 'start_time': 0, 'end_time': 10, 'lat': 34.0, 'lon': -118.0},
            {'agent_id': 'a', 'timestamp': 0, 'lat': 34.0, 'lon': -118.0},
        ])
        assert main(['ingest', path, '-o', os.path.join(temp_dir, 'out.jsonl')]) == 1
        assert 'line 2' in capsys.readouterr().err

    def test_missing_input(self, temp_dir):
        assert main(['ingest', os.path.join(temp_dir, 'nope.jsonl'), '-o', os.path.join(temp_dir, 'out.jsonl')]) == 1


class TestPretrain:
    """Test the pretrain subcommand."""

    def test_zero_steps(self, synth_file, temp_dir):
        out = os.path.join(temp_dir, 'run')
        assert main(['pretrain', '--data', synth_file, '-o', out, '--steps', '0', '--split', 'all', *TINY_MODEL]) == 0
        manifest = read_json(os.path.join(out, 'checkpoint.gmtm.manifest.json'))
        assert manifest['subcommand'] == 'pretrain'
        assert manifest['config']['d_model'] == 8
        assert manifest['inputs'] == {'data': synth_file}
        assert len(manifest['checkpoint_digest']) == 64

    def test_same_seed_same_checkpoint(self, synth_file, temp_dir):
        digests = []
        for run in ('a', 'b'):
            out = os.path.join(temp_dir, run)
            assert main(['pretrain', '--data', synth_file, '-o', out, '--steps', '2', '--seed', '1', *TINY_MODEL]) == 0
            digests.append(read_json(os.path.join(out, 'checkpoint.gmtm.manifest.json'))['checkpoint_digest'])
        assert digests[0] == digests[1]

    def test_replay_from_manifest(self, synth_file, temp_dir):
        first = os.path.join(temp_dir, 'first')
        assert main(['pretrain', '--data', synth_file, '-o', first, '--steps', '2', '--seed', '3',
                     '--mask-ratio-range', '0.2', '0.4', *TINY_MODEL]) == 0
        manifest_path = os.path.join(first, 'checkpoint.gmtm.manifest.json')
        replay = os.path.join(temp_dir, 'replay')
        assert main(['pretrain', '--data', synth_file, '-o', replay, '--config', manifest_path]) == 0
        replayed = read_json(os.path.join(replay, 'checkpoint.gmtm.manifest.json'))
        assert replayed['checkpoint_digest'] == read_json(manifest_path)['checkpoint_digest']
        assert replayed['config']['pretrain_ratio_range'] == [0.2, 0.4]

    def test_cli_flag_beats_config_file(self, synth_file, temp_dir):
        config_path = os.path.join(temp_dir, 'settings.json')
        with open(config_path, 'w') as f:
            json.dump({'steps': 5, 'd_model': 8, 'n_heads': 2, 'n_layers': 1, 'max_len': 8, 'batch_size': 2}, f)
        out = os.path.join(temp_dir, 'run')
        assert main(['pretrain', '--data', synth_file, '-o', out, '--config', config_path, '--steps', '1']) == 0
        config = read_json(os.path.join(out, 'checkpoint.gmtm.manifest.json'))['config']
        assert config['steps'] == 1
        assert config['d_model'] == 8

    def test_empty_dataset(self, make_dataset, temp_dir, capsys):
        path = os.path.join(temp_dir, 'short.jsonl')
        write_stop_file(path, make_dataset([('a', 'home', 0, 10, 34.0, -118.0), ('b', 'work', 0, 10, 34.1, -118.1)]))
        assert main(['pretrain', '--data', path, '-o', os.path.join(temp_dir, 'run'), '--split', 'all', *TINY_MODEL]) == 1
        assert 'no training windows' in capsys.readouterr().err

    def test_invalid_model_shape(self, synth_file, temp_dir, capsys):
        args = ['pretrain', '--data', synth_file, '-o', os.path.join(temp_dir, 'run'), '--d-model', '10', '--heads', '4']
        assert main(args) == 2
        err = capsys.readouterr().err
        assert 'divisible' in err
        assert 'usage: ' in err


class TestEval:
    """Test the eval subcommand."""

    def test_single_task(self, trained, synth_file, capsys):
        capsys.readouterr()
        assert main(['eval', '--checkpoint', trained, '--data', synth_file, '--tasks', 'goal', '--split', 'all']) == 0
        lines = capsys.readouterr().out.splitlines()
        assert lines[0].strip() == 'Goal'
        assert lines[3].startswith('synthetic')
        assert len(lines) == 4

    def test_report_files(self, trained, synth_file, temp_dir, capsys):
        out = os.path.join(temp_dir, 'report')
        assert main(['eval', '--checkpoint', trained, '--data', synth_file, '--split', 'all', '-o', out, '--name', 'demo']) == 0
        with open(os.path.join(out, 'report.txt')) as f:
            table = f.read()
        assert table.splitlines()[3].startswith('demo')
        with open(os.path.join(out, 'report.jsonl')) as f:
            assert [json.loads(line)['task'] for line in f] == ['id', 'fd', 'random', 'goal']
        manifest = read_json(os.path.join(out, 'report.jsonl.manifest.json'))
        assert manifest['config']['tasks'] == ['id', 'fd', 'random', 'goal']

    def test_one_line_per_data_file(self, trained, synth_file, temp_dir, capsys):
        other = os.path.join(temp_dir, 'other.jsonl')
        shutil.copy(synth_file, other)
        out = os.path.join(temp_dir, 'report')
        capsys.readouterr()
        assert main(['eval', '--checkpoint', trained, '--data', f'{synth_file}:combined', '--data', other,
                     '--tasks', 'goal', '--split', 'all', '-o', out]) == 0
        lines = capsys.readouterr().out.splitlines()
        assert len(lines) == 5
        assert lines[3].startswith('combined ')
        assert lines[4].startswith('other ')
        # identical inputs score identically
        assert lines[3].split()[1:] == lines[4].split()[1:]
        with open(os.path.join(out, 'report.jsonl')) as f:
            assert [json.loads(line)['dataset'] for line in f] == ['combined', 'other']
        manifest = read_json(os.path.join(out, 'report.jsonl.manifest.json'))
        assert manifest['inputs']['data'] == {'combined': synth_file, 'other': other}

    @pytest.mark.parametrize('extra', [['--name', 'demo'], []])
    def test_ambiguous_labels_are_usage_errors(self, trained, synth_file, capsys, extra):
        args = ['eval', '--checkpoint', trained, '--data', synth_file, '--data', synth_file, *extra]
        assert main(args) == 2
        err = capsys.readouterr().err
        assert 'usage: ' in err
        assert ('--name' in err) if extra else ('duplicate report labels: synthetic' in err)


class TestDataInputs:
    """Test splitting of eval --data values."""

    def test_labels(self):
        assert parse_data_inputs(['runs/a.jsonl:weekday', 'runs/b.jsonl']) == [
            ('runs/a.jsonl', 'weekday'), ('runs/b.jsonl', 'b'),
        ]

    def test_name_labels_a_single_file(self):
        assert parse_data_inputs(['runs/a.jsonl'], 'demo') == [('runs/a.jsonl', 'demo')]

    def test_colon_inside_path_is_not_a_label(self):
        assert parse_data_inputs(['odd:dir/a.jsonl']) == [('odd:dir/a.jsonl', 'a')]

    def test_duplicate_labels(self):
        with pytest.raises(ConfigError, match='duplicate'):
            parse_data_inputs(['a.jsonl:x', 'b.jsonl:x'])

    def test_unknown_task(self, trained, synth_file, capsys):
        assert main(['eval', '--checkpoint', trained, '--data', synth_file, '--tasks', 'id,teleport']) == 2
        err = capsys.readouterr().err
        assert 'teleport' in err
        assert 'id, fd, random, goal' in err

    def test_vocab_mismatch(self, trained, records_file, capsys):
        expected = load_checkpoint(trained).vocab
        reordered = list(reversed(expected.categories))
        path = records_file('other.jsonl', [
            {'agent_id': 'a', 'category': name, 'start_time': 100 * k, 'end_time': 100 * k + 50, 'lat': 34.0, 'lon': -118.0}
            for k, name in enumerate(reordered * 2)
        ])
        capsys.readouterr()
        assert main(['eval', '--checkpoint', trained, '--data', path, '--split', 'all']) == 1
        err = capsys.readouterr().err
        assert expected.fingerprint() in err
        assert load_stop_file(path).vocab.fingerprint() in err

    def test_corrupt_checkpoint(self, synth_file, temp_dir):
        path = os.path.join(temp_dir, 'bad.gmtm')
        with open(path, 'wb') as f:
            f.write(b'not a checkpoint')
        assert main(['eval', '--checkpoint', path, '--data', synth_file]) == 1

    def test_tensor_table_without_shape(self, trained, synth_file, capsys):
        with open(trained, 'rb') as f:
            data = f.read()
        header, start = read_checkpoint_header(data)
        del header['tensors'][0]['shape']
        encoded = json.dumps(header).encode('utf-8')
        with open(trained, 'wb') as f:
            f.write(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(encoded)) + encoded + data[start:])
        capsys.readouterr()
        assert main(['eval', '--checkpoint', trained, '--data', synth_file, '--split', 'all']) == 1
        assert "'shape'" in capsys.readouterr().err


class TestInspect:

    def test_header(self, trained, capsys):
        capsys.readouterr()
        assert main(['inspect', trained]) == 0
        header = json.loads(capsys.readouterr().out)
        assert header['model_config']['n_layers'] == 1
        assert header['payload_offset'] > 12
        assert len(header['sha256']) == 64
        assert len(header['vocab_fingerprint']) == 12


class TestDeskScale:
    """Synthesize, pretrain and evaluate with default settings end to end."""

    @pytest.mark.slow
    def test_default_pipeline_quality(self, temp_dir):
        data = os.path.join(temp_dir, 'synthetic.jsonl')
        run = os.path.join(temp_dir, 'run')
        report = os.path.join(temp_dir, 'report')
        assert main(['synth', '-o', data]) == 0
        assert main(['pretrain', '--data', data, '-o', run]) == 0
        assert main(['eval', '--checkpoint', os.path.join(run, 'checkpoint.gmtm'), '--data', data, '-o', report]) == 0

        with open(os.path.join(report, 'report.jsonl')) as f:
            rows = {record['task']: record for record in map(json.loads, f)}
        assert list(rows) == ['id', 'fd', 'random', 'goal']
        assert rows['random']['accuracy'] >= 0.80
        assert rows['goal']['accuracy'] >= 0.70
        for record in rows.values():
            assert 0.8 <= record['bias_ratio'] <= 1.25
        # ID and FD hide half the window; the detail error bound holds for scattered masks
        assert rows['random']['mse'] <= 0.02
