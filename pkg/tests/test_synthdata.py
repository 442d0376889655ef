import numpy as np
import pytest

from feainf.metrics import confusion_metrics
from feainf.pnm import PNMError, decode, encode, read_image, write_image
from feainf.synthdata import SynthConfig, generate, load_dataset, save_dataset


@pytest.fixture(scope="module")
def default_sets():
    return generate(SynthConfig())


def test_default_counts_and_ids(default_sets):
    train, test = default_sets
    assert len(train) == 200 and len(test) == 100
    assert train.images.shape == (200, 64, 64, 1)
    assert not {im.id for im in train} & {im.id for im in test}
    assert train.labels.sum() == 100 and test.labels.sum() == 50


def test_masks_and_contrast(default_sets):
    for ds in default_sets:
        for im in ds:
            assert set(np.unique(im.mask)) <= {0, 1}
            assert 0.0 <= im.pixels.min() and im.pixels.max() <= 1.0
            if im.label == 0:
                assert not im.mask.any()
            else:
                assert im.mask.any()
                inside = im.pixels[:, :, 0][im.mask == 1].mean()
                outside = im.pixels[:, :, 0][im.mask == 0].mean()
                assert inside - outside >= 0.2
                assert confusion_metrics(im.mask, im.mask) == (1.0, 1.0, 1.0)


def test_deterministic():
    cfg = SynthConfig(n_train=5, n_test=3, seed=4)
    a, b = generate(cfg), generate(cfg)
    for da, db in zip(a, b):
        for x, y in zip(da, db):
            assert x.id == y.id and x.label == y.label
            assert x.pixels.tobytes() == y.pixels.tobytes()
    other = generate(SynthConfig(n_train=5, n_test=3, seed=5))
    assert other[0].images.tobytes() != a[0].images.tobytes()


def test_background_depends_on_position():
    train, _ = generate(SynthConfig(n_train=20, n_test=1, noise=0.0))
    normal = train.images[train.labels == 0][:, :, :,0].mean(axis=0)
    assert normal[-8:].mean() - normal[:8].mean() > 0.1


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(n_train=0)
    with pytest.raises(ValueError):
        SynthConfig(height=10, width=10, radius_max=7)
    with pytest.raises(ValueError):
        SynthConfig(background="stripes")


def test_color_channels():
    train, _ = generate(SynthConfig(channels=3, n_train=2, n_test=1))
    assert train.images.shape[-1] == 3


def test_save_load_round_trip(tmp_path):
    train, _ = generate(SynthConfig(n_train=6, n_test=1, seed=2))
    save_dataset(train, tmp_path)
    back = load_dataset(tmp_path)
    assert [im.id for im in back] == [im.id for im in train]
    for a, b in zip(train, back):
        assert a.label == b.label
        assert np.array_equal(a.mask, b.mask)
        assert np.max(np.abs(a.pixels - b.pixels)) <= 0.5 / 255 + 1e-12
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


# ----------------------------------------------------------------------
def test_pnm_zero_round_trip(tmp_path):
    path = tmp_path / "z.pgm"
    write_image(path, np.zeros((4, 4)))
    assert np.array_equal(read_image(path), np.zeros((4, 4, 1)))


def test_pnm_gradient_round_trip(tmp_path):
    img = np.linspace(0, 1, 7 * 9).reshape(7, 9, 1)
    path = tmp_path / "g.pgm"
    write_image(path, img)
    assert np.max(np.abs(read_image(path) - img)) <= 1 / 255
    rgb = np.random.default_rng(0).uniform(size=(3, 5, 3))
    write_image(tmp_path / "c.ppm", rgb)
    assert np.max(np.abs(read_image(tmp_path / "c.ppm") - rgb)) <= 1 / 255


def test_pnm_header_comments():
    buf = b"P5\n# a comment\n2 1\n# another\n255\n\x00\xff"
    np.testing.assert_array_equal(decode(buf)[:, :, 0], [[0.0, 1.0]])


def test_pnm_truncated_names_offset():
    buf = encode(np.zeros((4, 4)))
    with pytest.raises(PNMError) as info:
        decode(buf[:-5], "t.pgm")
    assert info.value.offset == len(buf) - 5
    assert "byte" in str(info.value) and "t.pgm" in str(info.value)


def test_pnm_bad_headers():
    with pytest.raises(PNMError, match="magic"):
        decode(b"P2\n1 1\n255\n0")
    with pytest.raises(PNMError, match="8-bit"):
        decode(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(PNMError, match="header"):
        decode(b"P5\n1")
