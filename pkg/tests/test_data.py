"""
Tests for services/data.py
"""

import json

import numpy as np
import pytest

from services.data import (
    AlignedSegment, DatasetHeader, ModalitySequence, cross_modal_correlation, generate_synthetic,
    load_dataset, open_dataset, read_dataset, save_dataset, split_dataset, split_sizes,
    synthetic_header, validate_file, validate_segment,
)
from services.errors import AlignmentError, DatasetFormatError, LabelRangeError, SpecError

from conftest import DIMS, VOCAB


def segment(seg_id='s0', T=3, label=0.5, dims=DIMS):
    rng = np.random.default_rng(0)
    return AlignedSegment(
        id=seg_id,
        text=ModalitySequence('T', rng.normal(size=(T, dims[0])), [2] * T),
        audio=ModalitySequence('A', rng.normal(size=(T, dims[1]))),
        video=ModalitySequence('V', rng.normal(size=(T, dims[2]))),
        label=label,
    )


def records(segments):
    return [s.to_record() for s in segments]


def test_valid_segment_has_no_diagnostics():
    assert validate_segment(segment(), synthetic_header(DIMS, VOCAB)) == []


def test_label_out_of_range():
    kinds = [d.kind for d in validate_segment(segment(label=3.5))]
    assert kinds == ['label_range']


def test_nan_feature_reports_position():
    seg = segment()
    seg.audio.features[1, 2] = np.nan
    diags = validate_segment(seg)
    assert len(diags) == 1
    assert diags[0].kind == 'finiteness'
    assert 'A' in diags[0].message and 'step 1' in diags[0].message and 'index 2' in diags[0].message


def test_every_violation_is_reported():
    seg = segment(label=-4.0)
    seg.video = ModalitySequence('V', np.zeros((2, DIMS[2])))
    seg.text.token_ids = [2, 0, 2]
    kinds = sorted(d.kind for d in validate_segment(seg))
    assert kinds == ['alignment', 'label_range', 'tokens']


def test_header_dims_are_checked():
    header = synthetic_header((9, DIMS[1], DIMS[2]), VOCAB)
    assert [d.kind for d in validate_segment(segment(), header)] == ['shape']


def test_save_then_load_is_identity(tmp_path, tiny_segments):
    path = save_dataset(tmp_path / 'd.jsonl', tiny_segments, synthetic_header(DIMS, VOCAB))
    header, loaded = read_dataset(path)
    assert header == synthetic_header(DIMS, VOCAB)
    assert records(loaded) == records(tiny_segments)


def test_saved_file_is_byte_stable(tmp_path, tiny_segments):
    a = save_dataset(tmp_path / 'a.jsonl', tiny_segments)
    b = save_dataset(tmp_path / 'b.jsonl', list(reversed(tiny_segments)))
    assert a.read_bytes() == b.read_bytes()
    first = json.loads(a.read_text().splitlines()[0])
    assert first['format'] == 'mmtranslate-dataset' and first['version'] == 1


def test_loaded_segments_are_sorted_by_id(tmp_path):
    path = save_dataset(tmp_path / 'd.jsonl', [segment('b'), segment('a')])
    assert [s.id for s in load_dataset(path)] == ['a', 'b']


def test_empty_file_is_an_empty_dataset(tmp_path):
    path = tmp_path / 'empty.jsonl'
    path.write_text('')
    assert load_dataset(path) == []
    with pytest.raises(DatasetFormatError):
        open_dataset(path)


def _write(path, header, *segment_records):
    lines = [json.dumps(header.to_record())] + [json.dumps(r) for r in segment_records]
    path.write_text('\n'.join(lines) + '\n')
    return path


def test_misaligned_segment_names_the_segment(tmp_path):
    bad = segment('broken').to_record()
    bad['audio']['features'] = bad['audio']['features'][:2]
    path = _write(tmp_path / 'd.jsonl', synthetic_header(DIMS, VOCAB), segment('fine').to_record(), bad)
    with pytest.raises(AlignmentError) as err:
        load_dataset(path)
    assert 'broken' in err.value.message


def test_label_error_on_load(tmp_path):
    path = _write(tmp_path / 'd.jsonl', synthetic_header(DIMS, VOCAB), segment('loud', label=7.0).to_record())
    with pytest.raises(LabelRangeError):
        load_dataset(path)


def test_parse_error_carries_line_number(tmp_path):
    path = tmp_path / 'd.jsonl'
    path.write_text(json.dumps(synthetic_header(DIMS, VOCAB).to_record()) + '\n{"id": \n')
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(path)
    assert err.value.message.startswith('line 2')


def test_missing_header_mentions_the_format(tmp_path):
    path = tmp_path / 'd.jsonl'
    path.write_text(json.dumps(segment().to_record()) + '\n')
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(path)
    assert 'mmtranslate-dataset' in err.value.message


def test_unsupported_version(tmp_path):
    record = synthetic_header(DIMS, VOCAB).to_record()
    record['version'] = 2
    with pytest.raises(DatasetFormatError):
        DatasetHeader.from_record(record)


def test_validate_file_collects_everything(tmp_path):
    bad = segment('b', label=9.0).to_record()
    bad['text']['tokens'] = [2, 2]
    path = _write(tmp_path / 'd.jsonl', synthetic_header(DIMS, VOCAB),
                  segment('a').to_record(), bad, segment('a').to_record())
    header, diags = validate_file(path)
    assert header.vocab_size == VOCAB
    assert {(d.segment_id, d.kind) for d in diags} == {('b', 'alignment'), ('b', 'label_range'), ('a', 'format')}
    assert all(d.line is not None for d in diags)


def test_non_object_segment_line_is_a_format_diagnostic(tmp_path):
    path = _write(tmp_path / 'd.jsonl', synthetic_header(DIMS, VOCAB), segment('a').to_record(), [1, 2, 3])
    _, diags = validate_file(path)
    assert [(d.kind, d.line) for d in diags] == [('format', 3)]
    assert 'JSON object' in diags[0].message
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(path)
    assert err.value.line == 3


@pytest.mark.parametrize('first_line', ['[1, 2, 3]', '"header"', '42'])
def test_non_object_header_line_is_a_format_error(tmp_path, first_line):
    path = tmp_path / 'd.jsonl'
    path.write_text(first_line + '\n' + json.dumps(segment().to_record()) + '\n')
    for check in (validate_file, load_dataset):
        with pytest.raises(DatasetFormatError) as err:
            check(path)
        assert err.value.line == 1
        assert 'JSON object' in err.value.message


def test_split_sizes_for_one_hundred():
    assert split_sizes(100) == (57, 10, 33)
    assert split_sizes(8) == (4, 1, 3)


def test_split_is_deterministic_and_partitions(tiny_segments):
    first = split_dataset(tiny_segments, seed=4)
    again = split_dataset(tiny_segments, seed=4)
    assert first.to_dict() == again.to_dict()
    ids = first.train + first.validation + first.test
    assert sorted(ids) == sorted(s.id for s in tiny_segments)


def test_split_ignores_input_order(tiny_segments):
    a = split_dataset(tiny_segments, seed=1)
    b = split_dataset(list(reversed(tiny_segments)), seed=1)
    assert a.to_dict() == b.to_dict()


def test_different_seeds_keep_sizes():
    segs = [segment(f's{i:02d}') for i in range(30)]
    a, b = split_dataset(segs, seed=0), split_dataset(segs, seed=1)
    assert (a.train, a.validation, a.test) != (b.train, b.validation, b.test)
    assert (len(a.train), len(a.validation), len(a.test)) == (len(b.train), len(b.validation), len(b.test))


def rhu(numerator, denominator):
    """Round half up for non-negative rationals, in integers"""
    return (2 * numerator + denominator) // (2 * denominator)


def test_split_sizes_follow_the_rounding_rule_for_every_size():
    for n in range(3, 501):
        pool = rhu(n * 6667, 10000)
        val = rhu(pool * 1515, 10000)
        assert split_sizes(n) == (pool - val, val, n - pool)


def test_split_partitions_every_size():
    pool_of_segments = [segment(f's{i:03d}', T=1) for i in range(500)]
    for n in range(3, 501):
        segs = pool_of_segments[:n]
        train, val, test = split_sizes(n)
        if min(train, val, test) < 1:
            with pytest.raises(SpecError):
                split_dataset(segs, seed=n)
            continue
        split = split_dataset(segs, seed=n)
        assert (len(split.train), len(split.validation), len(split.test)) == (train, val, test)
        assert sorted(split.train + split.validation + split.test) == sorted(s.id for s in segs)


@pytest.mark.parametrize('n', [1, 3, 5])
def test_too_small_to_split(n):
    with pytest.raises(SpecError):
        split_dataset([segment(f's{i}') for i in range(n)])


def test_split_rejects_bad_fractions(tiny_segments):
    with pytest.raises(SpecError):
        split_dataset(tiny_segments, train_frac=1.0)
    with pytest.raises(SpecError):
        split_dataset(tiny_segments, val_frac_of_train=0.0)


def test_synthetic_is_reproducible_and_valid():
    a = generate_synthetic(12, (2, 6), DIMS, VOCAB, 0.7, seed=3)
    b = generate_synthetic(12, (2, 6), DIMS, VOCAB, 0.7, seed=3)
    assert records(a) == records(b)
    header = synthetic_header(DIMS, VOCAB)
    for seg in a:
        assert validate_segment(seg, header) == []
        assert 2 <= seg.length <= 6
        assert -3.0 <= seg.label <= 3.0
    assert [s.id for s in a] == sorted(s.id for s in a)


def test_synthetic_seed_changes_output():
    assert records(generate_synthetic(3, seed=0)) != records(generate_synthetic(3, seed=1))


def test_uncoupled_modalities_are_uncorrelated():
    segs = generate_synthetic(200, coupling=0.0, seed=0)
    assert abs(cross_modal_correlation(segs, 'T', 'A')) < 0.1


def test_fully_coupled_modalities_are_correlated():
    segs = generate_synthetic(200, coupling=1.0, seed=0)
    assert abs(cross_modal_correlation(segs, 'T', 'V')) > 0.9
    assert abs(cross_modal_correlation(segs, 'A', 'V', index=3)) > 0.9


def test_generator_argument_checks():
    with pytest.raises(SpecError):
        generate_synthetic(0)
    with pytest.raises(SpecError):
        generate_synthetic(2, coupling=1.5)
    with pytest.raises(SpecError):
        generate_synthetic(2, vocab_size=2)
