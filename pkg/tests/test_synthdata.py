from dataclasses import replace

import numpy as np
import pytest

from adllab.localization import BBox
from adllab.model import BlockSpec, ModelConfig, SGDConfig, build_model, train
from adllab.rng import Rng
from adllab.synthdata import (
    BACKGROUND_RGB,
    DataSpec,
    DataSpecError,
    generate_dataset,
    read_spec_header,
    read_split,
    render_sample,
    sample_layout,
    spec_from_ini,
    spec_to_ini,
    write_dataset,
)

SMALL = DataSpec(samples_per_class=10, seed=3)


def _layouts(spec, n):
    return [sample_layout(spec, Rng.derive(spec.seed, "layout", i)) for i in range(n)]


def test_counts_and_split():
    train, test = generate_dataset(SMALL)
    assert len(train) + len(test) == 40
    assert len(test) == 4 * 2
    for c in range(4):
        assert (train.labels == c).sum() == 8 and (test.labels == c).sum() == 2
    assert set(train.names).isdisjoint(test.names)


def test_generation_is_bit_identical():
    a = generate_dataset(SMALL)
    b = generate_dataset(SMALL)
    for x, y in zip(a, b):
        assert x.images.tobytes() == y.images.tobytes()
        assert np.array_equal(x.labels, y.labels) and x.boxes == y.boxes and x.names == y.names


def test_seed_changes_data():
    a, _ = generate_dataset(SMALL)
    b, _ = generate_dataset(replace(SMALL, seed=4))
    assert a.images.tobytes() != b.images.tobytes()


def test_head_is_small_fraction_of_box():
    spec = DataSpec(seed=1)
    for i, layout in enumerate(_layouts(spec, 200)):
        s = render_sample(i % 4, layout, spec, None)
        assert s.head_mask.sum() / s.box.area <= 0.2
        # a box around the head alone would be a localization miss
        head_box = BBox.of_mask(s.head_mask)
        inter = (min(head_box.x1, s.box.x1) - max(head_box.x0, s.box.x0)) * (min(head_box.y1, s.box.y1) - max(head_box.y0, s.box.y0))
        assert inter / (head_box.area + s.box.area - inter) < 0.5


def test_box_is_tight_pixel_scan():
    spec = DataSpec(seed=2, noise_std=0.0)
    bg = np.array(BACKGROUND_RGB) / 255.0
    for i, layout in enumerate(_layouts(spec, 50)):
        s = render_sample(i % 4, layout, spec, None)
        ys, xs = np.nonzero(np.any(s.image != bg, axis=-1))
        assert s.box.as_tuple() == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
        assert s.box.within(spec.image_size, spec.image_size)


def test_background_exact_without_noise():
    spec = DataSpec(seed=5, noise_std=0.0)
    s = render_sample(2, _layouts(spec, 1)[0], spec, Rng(1))
    np.testing.assert_array_equal(s.image[~s.object_mask], np.broadcast_to(np.array(BACKGROUND_RGB) / 255.0, (int((~s.object_mask).sum()), 3)))


def test_classes_differ_only_in_head():
    spec = DataSpec(seed=6)
    layout = _layouts(spec, 1)[0]
    imgs = [render_sample(c, layout, spec, Rng(9)).image for c in range(spec.num_classes)]
    head = render_sample(0, layout, spec, None).head_mask
    for other in imgs[1:]:
        diff = np.any(other != imgs[0], axis=-1)
        assert diff.any()
        assert not diff[~head].any()


def test_images_are_8bit_quantized():
    train, _ = generate_dataset(SMALL)
    assert np.array_equal(np.rint(train.images * 255) / 255, train.images)


def test_class_lives_in_the_head():
    spec = DataSpec(samples_per_class=40, seed=7)
    layouts = _layouts(spec, 160)
    crops, rest, labels = [], [], []
    for i, layout in enumerate(layouts):
        c = i // 40
        s = render_sample(c, layout, spec, Rng.derive(spec.seed, "noise", i))
        cy, cx = int(layout.head_y), int(layout.head_x)
        pad = np.pad(s.image, ((4, 4), (4, 4), (0, 0)), mode="edge")
        crops.append(pad[cy:cy + 8, cx:cx + 8])
        rest.append(s.image[~s.head_mask].mean(axis=0))
        labels.append(c)
    crops, labels = np.stack(crops), np.array(labels)
    net = build_model(ModelConfig([BlockSpec("h", 8, 3, "max2x2")], 4), Rng(0))
    log = train(net, crops, labels, SGDConfig(lr=0.05, epochs=30, batch_size=16), Rng(1))
    assert log.accuracy[-1] >= 0.9
    # without the head, per-class colour statistics coincide
    rest = np.stack(rest)
    centroids = np.stack([rest[labels == c].mean(axis=0) for c in range(4)])
    assert np.ptp(centroids, axis=0).max() < 0.02


def test_class_correlated_background_leaks_class():
    spec = DataSpec(seed=8, noise_std=0.0, class_correlated=True)
    layout = _layouts(spec, 1)[0]
    a = render_sample(0, layout, spec, None)
    b = render_sample(1, layout, spec, None)
    assert np.any(a.image[~a.object_mask] != b.image[~b.object_mask])


def test_textured_background_is_class_independent():
    spec = DataSpec(seed=8, noise_std=0.0, background="textured")
    layout = _layouts(spec, 1)[0]
    a = render_sample(0, layout, spec, None)
    b = render_sample(3, layout, spec, None)
    np.testing.assert_array_equal(a.image[~a.head_mask], b.image[~b.head_mask])


@pytest.mark.parametrize("kw", [
    dict(num_classes=1),
    dict(head_radius_min=0.0),
    dict(body_length_min=30, body_length_max=40),
    dict(background="stripes"),
    dict(test_fraction=1.0),
    dict(body_width_max=30),
])
def test_invalid_specs(kw):
    with pytest.raises(DataSpecError):
        replace(DataSpec(), **kw).validate()


def test_directory_roundtrip(tmp_path):
    train, test = generate_dataset(SMALL)
    write_dataset(train, test, tmp_path, SMALL)
    back = read_split(tmp_path / "test")
    assert back.images.tobytes() == test.images.tobytes()
    assert back.boxes == test.boxes and np.array_equal(back.labels, test.labels)
    assert read_spec_header(tmp_path / "train") == SMALL
    manifest = (tmp_path / "train" / "manifest.txt").read_text().splitlines()
    assert len([l for l in manifest if not l.startswith("#")]) == len(train)


def test_spec_ini_roundtrip():
    spec = replace(DataSpec(), seed=11, background="textured", noise_std=0.05)
    assert spec_from_ini(spec_to_ini(spec)) == spec


def test_unknown_spec_key():
    with pytest.raises(DataSpecError):
        spec_from_ini("[data]\ncolour = red\n")
