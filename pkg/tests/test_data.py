import filecmp
import os

import numpy as np
import pytest

from segdecode.data import (
    PnmHeaderError,
    PnmMaxvalError,
    PnmTruncatedError,
    SynthSpec,
    class_pixel_shares,
    generate_synthetic,
    load_image_ppm,
    load_label_pgm,
    load_manifest,
    load_split,
    parse_config,
    parse_config_text,
    save_image_ppm,
    save_label_pgm,
)

SMALL = dict(height=32, width=32, n_train=6, n_val=2, n_test=2)


def test_ppm_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, (5, 7, 3), dtype=np.uint8)
    save_image_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(load_image_ppm(tmp_path / "a.ppm"), img)


def test_pgm_round_trip(tmp_path, rng):
    lab = rng.integers(0, 256, (4, 9), dtype=np.uint8)
    save_label_pgm(tmp_path / "a.pgm", lab)
    assert np.array_equal(load_label_pgm(tmp_path / "a.pgm"), lab)


def test_header_comments(tmp_path):
    payload = bytes(range(12))
    (tmp_path / "c.ppm").write_bytes(b"P6\n# made by hand\n2 # width\n2\n# depth next\n255\n" + payload)
    np.testing.assert_array_equal(load_image_ppm(tmp_path / "c.ppm").reshape(-1), list(payload))


@pytest.mark.parametrize("blob,err,offset", [
    (b"P3\n2 2\n255\n" + bytes(12), PnmHeaderError, 0),
    (b"P6\n2 x\n255\n" + bytes(12), PnmHeaderError, 5),
    (b"P6\n2 2\n65535\n" + bytes(24), PnmMaxvalError, 7),
    (b"P6\n2 2\n255\n" + bytes(11), PnmTruncatedError, 22),
    (b"P6\n2 2", PnmTruncatedError, 6),
])
def test_malformed_files(tmp_path, blob, err, offset):
    (tmp_path / "bad.ppm").write_bytes(blob)
    with pytest.raises(err) as info:
        load_image_ppm(tmp_path / "bad.ppm")
    assert info.value.offset == offset
    assert f"byte {offset}" in str(info.value)


def test_generation_is_deterministic(tmp_path):
    spec = SynthSpec(**SMALL)
    generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    files = sorted(os.listdir(tmp_path / "a" / "train"))
    assert files and not cmp.diff_files
    for split in ("train", "val", "test"):
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / split, tmp_path / "b" / split,
                                               os.listdir(tmp_path / "a" / split), shallow=False)
        assert not mismatch and not errors


def test_generated_labels_in_range_and_every_class_trained(tmp_path):
    spec = SynthSpec(classes=5, **SMALL)
    m = generate_synthetic(spec, tmp_path)
    seen = np.zeros(5, bool)
    for split in ("train", "val", "test"):
        for _, lab in m.split(split):
            lab = load_label_pgm(os.path.join(m.root, lab))
            assert ((lab < 5) | (lab == spec.ignore_label)).all()
            if split == "train":
                seen[np.unique(lab)] = True
    assert seen.all()


def test_background_dominates_with_skew(tmp_path):
    m = generate_synthetic(SynthSpec(classes=4, skew=4, height=32, width=32, n_train=20, n_val=1, n_test=1), tmp_path)
    shares = class_pixel_shares(m)
    assert shares[0] > shares[1:].max()


def test_manifest_round_trip_and_split_loading(tmp_path):
    m = generate_synthetic(SynthSpec(**SMALL), tmp_path)
    back = load_manifest(tmp_path / "manifest.txt")
    assert back.records == m.records and back.num_classes == 6 and back.ignore_label == 255
    assert (tmp_path / "manifest.txt").read_text().splitlines()[0] == "K=6 ignore=255"
    data = load_split(back, "val", depth=4)
    assert data.images.shape == (2, 3, 32, 32) and data.labels.shape == (2, 32, 32)
    with pytest.raises(ValueError, match="divisible"):
        load_split(back, "val", depth=6)


def test_manifest_rejects_missing_files_and_overlap(tmp_path):
    generate_synthetic(SynthSpec(**SMALL), tmp_path)
    text = (tmp_path / "manifest.txt").read_text()
    (tmp_path / "m1.txt").write_text(text + "test\tnope.ppm\tnope.pgm\n")
    with pytest.raises(FileNotFoundError):
        load_manifest(tmp_path / "m1.txt")
    first = text.splitlines()[1].split("\t")
    (tmp_path / "m2.txt").write_text(text + f"test\t{first[1]}\t{first[2]}\n")
    with pytest.raises(ValueError, match="appears in splits"):
        load_manifest(tmp_path / "m2.txt")


def test_label_range_checked_at_load(tmp_path):
    m = generate_synthetic(SynthSpec(**SMALL), tmp_path)
    _, lab = m.split("test")[0]
    bad = load_label_pgm(tmp_path / lab)
    bad[0, 0] = 9
    save_label_pgm(tmp_path / lab, bad)
    with pytest.raises(ValueError, match="label 9"):
        load_split(load_manifest(tmp_path / "manifest.txt"), "test")


def test_config_defaults():
    cfg = parse_config_text("")
    assert cfg.train.lr == 0.1 and cfg.train.momentum == 0.9 and cfg.train.batch_size == 12
    assert cfg.train.eval_every == 1000 and cfg.train.balancing == "median_frequency"


def test_config_overrides(tmp_path):
    (tmp_path / "c.cfg").write_text("# desk run\nmomentum = 0.95\nclasses = 4  # fewer\nlcn = false\n"
                                    "variants = segnet-basic, fcn-basic\n")
    cfg = parse_config(tmp_path / "c.cfg")
    assert cfg.train.momentum == 0.95 and cfg.synth.classes == 4 and cfg.train.lcn is False
    assert cfg.variants == ("segnet-basic", "fcn-basic")


@pytest.mark.parametrize("text,line", [
    ("momentum = 0.9\nlr = abc\n", 2),
    ("lr = 0.1\n\nlr = 0.2\n", 3),
    ("bogus = 1\n", 1),
    ("just words\n", 1),
])
def test_config_errors_name_the_line(text, line):
    with pytest.raises(ValueError, match=f":{line}:|line {line}"):
        parse_config_text(text)
