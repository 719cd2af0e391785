import dataclasses
import json
import math
import os

import numpy as np
import pytest

from posefuse.aggregation import AggregatorModel, ModelConfig, model_fingerprint
from posefuse.cli import EXIT_ARTIFACT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from posefuse.dataset import (DATASET_VERSION, DatasetLayout, SampleRecord,
                              TemplateRecord, generate_synthetic_dataset,
                              load_dataset, make_train_samples, sample_stack,
                              save_dataset, template_meta)
from posefuse.errors import ManifestError
from posefuse.evaluation import evaluate_acc, write_report_text
from posefuse.features import fixture_save, synthetic_extract
from posefuse.geometry import ClassLabel, geodesic_distance, random_rotation
from posefuse.matching import build_gallery, load_gallery

from conftest import TINY_SPEC

CLI_CONFIG = {
    "provider": {"kind": "synthetic",
                 "layer_spec": [list(s) for s in TINY_SPEC],
                 "noise_level": 0.05},
    "model": {"arch": "va", "C": 8, "S": 8, "C_mid": 0, "hidden": 0},
    "training": {"epochs": 1, "learning_rate": 1e-3, "tau": 0.1, "M": 3,
                 "delta": 0.2, "batch_size": 2},
    "eval": {"delta": 0.2, "lambda_deg": 15.0},
}


def tiny_layout(root, **kwargs):
    args = dict(classes=2, templates_per_class=3, queries_per_class=2,
                noise=0.05, seed=7, perturb_deg=5.0, unseen_classes=1,
                layer_spec=TINY_SPEC)
    args.update(kwargs)
    return generate_synthetic_dataset(str(root), **args)


def write_config(tmp_path, **overrides):
    payload = dict(CLI_CONFIG)
    payload.update(overrides)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(payload))
    return str(path)


class TestLayoutValidation:
    def _classes(self):
        return (ClassLabel(0, "a"), ClassLabel(1, "b"))

    def test_duplicate_class_ids(self):
        with pytest.raises(ManifestError):
            DatasetLayout("r", "synthetic", TINY_SPEC,
                          0.0, (ClassLabel(0, "a"), ClassLabel(0, "b")),
                          frozenset({0}), (), ())

    def test_seen_must_be_declared(self):
        with pytest.raises(ManifestError):
            DatasetLayout("r", "synthetic", TINY_SPEC, 0.0, self._classes(),
                          frozenset({5}), (), ())

    def test_template_class_known(self):
        tmpl = TemplateRecord(9, random_rotation(0))
        with pytest.raises(ManifestError):
            DatasetLayout("r", "synthetic", TINY_SPEC, 0.0, self._classes(),
                          frozenset({0}), (tmpl,), ())

    def test_sample_split_and_class_checked(self):
        bad_split = SampleRecord("dev", 0, random_rotation(0))
        with pytest.raises(ManifestError):
            DatasetLayout("r", "synthetic", TINY_SPEC, 0.0, self._classes(),
                          frozenset({0}), (), (bad_split,))
        bad_class = SampleRecord("test", 9, random_rotation(0))
        with pytest.raises(ManifestError):
            DatasetLayout("r", "synthetic", TINY_SPEC, 0.0, self._classes(),
                          frozenset({0}), (), (bad_class,))

    def test_train_split_restricted_to_seen(self):
        leak = SampleRecord("train", 1, random_rotation(0))
        with pytest.raises(ManifestError):
            DatasetLayout("r", "synthetic", TINY_SPEC, 0.0, self._classes(),
                          frozenset({0}), (), (leak,))

    def test_lookups(self, tmp_path):
        layout = tiny_layout(tmp_path / "d")
        assert layout.class_label(0).name == "class_000"
        with pytest.raises(KeyError):
            layout.class_label(42)
        with pytest.raises(ValueError):
            layout.split_samples("dev")
        assert layout.unseen_class_ids() == frozenset({1})


class TestSyntheticWorld:
    def test_counts(self, tmp_path):
        layout = tiny_layout(tmp_path / "d", classes=3, templates_per_class=4,
                             queries_per_class=2, unseen_classes=1)
        assert len(layout.classes) == 3
        assert len(layout.templates) == 3 * 4
        # 2 seen classes x (train+test) x 2 + 1 unseen class x test x 2
        assert len(layout.samples) == 2 * 2 * 2 + 1 * 2
        for c in range(3):
            ids = {t.class_id for t in layout.templates}.intersection({c})
            assert ids == {c}

    def test_unseen_classes_have_no_train_queries(self, tmp_path):
        layout = tiny_layout(tmp_path / "d")
        train_classes = {s.class_id for s in layout.split_samples("train")}
        test_classes = {s.class_id for s in layout.split_samples("test")}
        assert train_classes == layout.seen_class_ids
        assert test_classes == {c.id for c in layout.classes}

    def test_template_count_exact_and_distinct(self, tmp_path):
        layout = tiny_layout(tmp_path / "d", templates_per_class=10)
        per_class = [t for t in layout.templates if t.class_id == 0]
        assert len(per_class) == 10
        flats = {tuple(t.rotation.as_flat()) for t in per_class}
        assert len(flats) == 10

    def test_perturbation_magnitude_is_fixed(self, tmp_path):
        layout = tiny_layout(tmp_path / "d", classes=2, templates_per_class=6,
                             queries_per_class=5)
        by_class = {}
        for t in layout.templates:
            by_class.setdefault(t.class_id, []).append(t.rotation)
        distances = []
        for s in layout.samples:
            nearest = min(geodesic_distance(s.rotation, r)
                          for r in by_class[s.class_id])
            distances.append(nearest)
        want = 5.0 / 180.0
        assert np.median(distances) == pytest.approx(want, abs=1e-9)
        assert all(abs(d - want) < 1e-9 for d in distances)

    def test_regeneration_is_byte_identical(self, tmp_path):
        tiny_layout(tmp_path / "a")
        tiny_layout(tmp_path / "b")
        a = (tmp_path / "a" / "dataset.json").read_bytes()
        b = (tmp_path / "b" / "dataset.json").read_bytes()
        assert a == b

    def test_validation(self, tmp_path):
        with pytest.raises(ValueError):
            tiny_layout(tmp_path / "d", classes=0)
        with pytest.raises(ValueError):
            tiny_layout(tmp_path / "d", unseen_classes=2)
        with pytest.raises(ValueError):
            tiny_layout(tmp_path / "d", noise=-0.1)
        with pytest.raises(ValueError):
            tiny_layout(tmp_path / "d", templates_per_class=10 ** 9)

    def test_occlusion_rects(self, tmp_path):
        layout = tiny_layout(tmp_path / "d", occlude=True)
        for s in layout.samples:
            r0, c0, r1, c1 = s.occlusion
            assert 0.0 <= r0 <= 0.5 and 0.0 <= c0 <= 0.5
            assert r1 == pytest.approx(r0 + 0.5)
            assert c1 == pytest.approx(c0 + 0.5)

    def test_occlusion_zeroes_features(self, tmp_path):
        layout = tiny_layout(tmp_path / "d", occlude=True)
        record = layout.samples[0]
        occluded = sample_stack(layout, record)
        clean = sample_stack(layout, dataclasses.replace(record, occlusion=None))
        r0, c0, r1, c1 = record.occlusion
        differs = False
        for (_, occ), (_, base) in zip(occluded.layers, clean.layers):
            _, h, w = base.shape
            rows = slice(int(r0 * h), max(int(r0 * h) + 1, math.ceil(r1 * h)))
            cols = slice(int(c0 * w), max(int(c0 * w) + 1, math.ceil(c1 * w)))
            assert np.all(occ[:, rows, cols] == 0.0)
            differs = differs or not np.array_equal(occ, base)
        assert differs


class TestStacksAndMeta:
    def test_sample_stack_deterministic(self, tmp_path):
        layout = tiny_layout(tmp_path / "d")
        record = layout.samples[0]
        first = sample_stack(layout, record)
        second = sample_stack(layout, record)
        for (_, a), (_, b) in zip(first.layers, second.layers):
            assert a.tobytes() == b.tobytes()

    def test_make_train_samples_matches_records(self, tmp_path):
        layout = tiny_layout(tmp_path / "d")
        samples = make_train_samples(layout, "train")
        records = layout.split_samples("train")
        assert len(samples) == len(records)
        for sample, record in zip(samples, records):
            assert sample.gt_class.id == record.class_id
            assert np.array_equal(sample.gt_pose.rotation.m, record.rotation.m)
            assert sample.query_stack.layer_spec == layout.layer_spec

    def test_template_meta_is_clean_and_fully_masked(self, tmp_path):
        layout = tiny_layout(tmp_path / "d", noise=0.3)
        meta = template_meta(layout, resolution=8)
        assert len(meta) == len(layout.templates)
        for (label, pose, mask, stack, source), record in zip(meta, layout.templates):
            assert label.id == record.class_id
            assert mask.shape == (8, 8) and mask.all()
            assert source == record.source
            want = synthetic_extract(record.class_id, record.rotation,
                                     layout.layer_spec, 0.0, 0)
            for (_, a), (_, b) in zip(stack.layers, want.layers):
                assert a.tobytes() == b.tobytes()

    def test_fixture_indirection(self, tmp_path):
        layout = tiny_layout(tmp_path / "d")
        stack = synthetic_extract(0, random_rotation(3), layout.layer_spec, 0.0, 0)
        fixture_save(stack, str(tmp_path / "d" / "fixtures" / "q0"))
        record = dataclasses.replace(layout.samples[0], fixture="fixtures/q0")
        loaded = sample_stack(layout, record)
        for (_, a), (_, b) in zip(loaded.layers, stack.layers):
            assert a.tobytes() == b.tobytes()


class TestPersistence:
    def test_round_trip(self, tmp_path):
        layout = tiny_layout(tmp_path / "d", occlude=True)
        loaded = load_dataset(str(tmp_path / "d"))
        assert loaded.provider_kind == layout.provider_kind
        assert loaded.layer_spec == layout.layer_spec
        assert loaded.noise_level == layout.noise_level
        assert loaded.classes == layout.classes
        assert loaded.seen_class_ids == layout.seen_class_ids
        assert len(loaded.templates) == len(layout.templates)
        for a, b in zip(loaded.templates, layout.templates):
            assert (a.class_id, a.source, a.fixture) == (b.class_id, b.source,
                                                         b.fixture)
            assert np.array_equal(a.rotation.m, b.rotation.m)
        for a, b in zip(loaded.samples, layout.samples):
            assert (a.split, a.class_id, a.feature_seed) == (
                b.split, b.class_id, b.feature_seed)
            assert np.array_equal(a.rotation.m, b.rotation.m)
            assert a.occlusion == pytest.approx(b.occlusion)

    def test_save_twice_byte_identical(self, tmp_path):
        layout = tiny_layout(tmp_path / "d")
        save_dataset(layout, str(tmp_path / "again"))
        assert (tmp_path / "d" / "dataset.json").read_bytes() == \
            (tmp_path / "again" / "dataset.json").read_bytes()

    def test_version_guard(self, tmp_path):
        tiny_layout(tmp_path / "d")
        path = tmp_path / "d" / "dataset.json"
        payload = json.loads(path.read_text())
        payload["version"] = 99
        path.write_text(json.dumps(payload))
        with pytest.raises(ManifestError):
            load_dataset(str(tmp_path / "d"))

    def test_malformed_payload(self, tmp_path):
        tiny_layout(tmp_path / "d")
        path = tmp_path / "d" / "dataset.json"
        payload = json.loads(path.read_text())
        del payload["provider"]["layer_spec"]
        path.write_text(json.dumps(payload))
        with pytest.raises(ManifestError):
            load_dataset(str(tmp_path / "d"))


class TestCli:
    def _synth(self, tmp_path, config, name="data", seed="7"):
        out = str(tmp_path / name)
        code = main(["synth-data", "--config", config, "--seed", seed,
                     "--out", out, "--classes", "2", "--templates-per-class",
                     "3", "--queries-per-class", "2", "--unseen", "1"])
        assert code == EXIT_OK
        return out

    def test_synth_data_and_force_semantics(self, tmp_path):
        config = write_config(tmp_path)
        out = self._synth(tmp_path, config)
        assert os.path.isfile(os.path.join(out, "dataset.json"))
        first = open(os.path.join(out, "dataset.json"), "rb").read()
        code = main(["synth-data", "--config", config, "--seed", "7",
                     "--out", out, "--classes", "2", "--templates-per-class",
                     "3", "--queries-per-class", "2", "--unseen", "1"])
        assert code == EXIT_USAGE  # refuses to clobber without --force
        code = main(["synth-data", "--config", config, "--seed", "7",
                     "--out", out, "--force", "--classes", "2",
                     "--templates-per-class", "3", "--queries-per-class", "2",
                     "--unseen", "1"])
        assert code == EXIT_OK
        assert open(os.path.join(out, "dataset.json"), "rb").read() == first

    def test_seed_required(self, tmp_path):
        config = write_config(tmp_path)
        code = main(["synth-data", "--config", config,
                     "--out", str(tmp_path / "d")])
        assert code == EXIT_USAGE

    def test_unknown_command_is_usage_error(self):
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_bad_config_file(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        code = main(["synth-data", "--config", str(bad), "--seed", "1",
                     "--out", str(tmp_path / "d")])
        assert code == EXIT_USAGE
        code = main(["synth-data", "--config", str(tmp_path / "missing.json"),
                     "--seed", "1", "--out", str(tmp_path / "d")])
        assert code == EXIT_USAGE

    def test_missing_dataset_is_artifact_error(self, tmp_path):
        config = write_config(tmp_path)
        code = main(["eval", "--config", config, "--seed", "7",
                     "--dataset", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "r")])
        assert code == EXIT_ARTIFACT

    def test_build_gallery_matches_fresh_model(self, tmp_path):
        config = write_config(tmp_path)
        data = self._synth(tmp_path, config)
        out = str(tmp_path / "gal")
        code = main(["build-gallery", "--config", config, "--seed", "7",
                     "--dataset", data, "--out", out])
        assert code == EXIT_OK
        gallery = load_gallery(out)
        assert len(gallery.templates) == 6
        model = AggregatorModel(ModelConfig("va", TINY_SPEC, channels=8,
                                            resolution=8, seed=7))
        assert gallery.model_fingerprint == model_fingerprint(model)

    def test_eval_matches_in_process_run(self, tmp_path):
        config = write_config(tmp_path)
        data = self._synth(tmp_path, config)
        out = str(tmp_path / "report")
        code = main(["eval", "--config", config, "--seed", "7",
                     "--dataset", data, "--out", out])
        assert code == EXIT_OK
        layout = load_dataset(data)
        model = AggregatorModel(ModelConfig("va", TINY_SPEC, channels=8,
                                            resolution=8, seed=7))
        gallery = build_gallery(template_meta(layout, 8), model)
        report = evaluate_acc(make_train_samples(layout, "test"), gallery,
                              model, delta=0.2, lambda_deg=15.0,
                              seen_classes=layout.seen_class_ids, split="test")
        write_report_text(report, str(tmp_path / "want.txt"))
        assert (tmp_path / "want.txt").read_bytes() == \
            open(os.path.join(out, "report.txt"), "rb").read()

    def test_eval_rejects_stale_gallery(self, tmp_path):
        config = write_config(tmp_path)
        data = self._synth(tmp_path, config)
        gal = str(tmp_path / "gal")
        assert main(["build-gallery", "--config", config, "--seed", "7",
                     "--dataset", data, "--out", gal]) == EXIT_OK
        code = main(["eval", "--config", config, "--seed", "8",
                     "--dataset", data, "--gallery", gal,
                     "--out", str(tmp_path / "r")])
        assert code == EXIT_ARTIFACT

    def test_train_rejects_zero_epochs(self, tmp_path):
        config = write_config(tmp_path)
        data = self._synth(tmp_path, config)
        code = main(["train", "--config", config, "--seed", "7",
                     "--dataset", data, "--epochs", "0",
                     "--out", str(tmp_path / "ck")])
        assert code == EXIT_USAGE

    def test_train_then_eval_with_checkpoint(self, tmp_path):
        config = write_config(tmp_path)
        data = self._synth(tmp_path, config)
        ck = str(tmp_path / "ck")
        code = main(["train", "--config", config, "--seed", "7",
                     "--dataset", data, "--epochs", "1", "--out", ck])
        assert code == EXIT_OK
        assert os.path.isfile(os.path.join(ck, "state.json"))
        code = main(["eval", "--config", config, "--seed", "7",
                     "--dataset", data, "--checkpoint", ck,
                     "--out", str(tmp_path / "r")])
        assert code == EXIT_OK
        report = open(os.path.join(tmp_path, "r", "report.txt")).read()
        assert "test all" in report

    def test_pipeline_reruns_byte_identical(self, tmp_path):
        config = write_config(tmp_path)
        outputs = []
        for name in ("a", "b"):
            base = tmp_path / name
            data = self._synth(tmp_path, config, name=f"{name}_data")
            gal = str(base) + "_gal"
            rep = str(base) + "_rep"
            assert main(["build-gallery", "--config", config, "--seed", "7",
                         "--dataset", data, "--out", gal]) == EXIT_OK
            assert main(["eval", "--config", config, "--seed", "7",
                         "--dataset", data, "--gallery", gal,
                         "--out", rep]) == EXIT_OK
            outputs.append((data, gal, rep))
        (data_a, gal_a, rep_a), (data_b, gal_b, rep_b) = outputs
        assert open(os.path.join(data_a, "dataset.json"), "rb").read() == \
            open(os.path.join(data_b, "dataset.json"), "rb").read()
        for name in sorted(os.listdir(gal_a)):
            assert open(os.path.join(gal_a, name), "rb").read() == \
                open(os.path.join(gal_b, name), "rb").read()
        for name in ("report.txt", "report.csv", "run.json"):
            assert open(os.path.join(rep_a, name), "rb").read() == \
                open(os.path.join(rep_b, name), "rb").read()

    def test_match_emits_parseable_json(self, tmp_path, capsys):
        config = write_config(tmp_path)
        data = self._synth(tmp_path, config)
        gal = str(tmp_path / "gal")
        assert main(["build-gallery", "--config", config, "--seed", "7",
                     "--dataset", data, "--out", gal]) == EXIT_OK
        capsys.readouterr()
        code = main(["match", "--config", config, "--seed", "7",
                     "--gallery", gal, "--class-id", "0"])
        assert code == EXIT_OK
        payload = json.loads(capsys.readouterr().out.strip())
        gallery = load_gallery(gal)
        ids = {t.id for t in gallery.templates}
        assert payload["template_id"] in ids
        assert payload["model_fingerprint"] == gallery.model_fingerprint
        assert payload["class_id"] in {0, 1}
        assert len(payload["rotation"]) == 9

    def test_extract_round_trip(self, tmp_path):
        from posefuse.features import fixture_load
        config = write_config(tmp_path)
        fix = str(tmp_path / "fix")
        code = main(["extract", "--config", config, "--seed", "3",
                     "--out", fix, "--class-id", "1"])
        assert code == EXIT_OK
        stack = fixture_load(fix)
        assert stack.layer_spec == TINY_SPEC
        copied = str(tmp_path / "fix2")
        code = main(["extract", "--config", config, "--seed", "3",
                     "--out", copied, "--input", fix])
        assert code == EXIT_OK
        again = fixture_load(copied)
        for (_, a), (_, b) in zip(stack.layers, again.layers):
            assert a.tobytes() == b.tobytes()

    def test_viz_writes_png_and_sidecar(self, tmp_path):
        config = write_config(tmp_path)
        data = self._synth(tmp_path, config)
        gal = str(tmp_path / "gal")
        assert main(["build-gallery", "--config", config, "--seed", "7",
                     "--dataset", data, "--out", gal]) == EXIT_OK
        out = str(tmp_path / "view.png")
        code = main(["viz", "--config", config, "--seed", "7",
                     "--gallery", gal, "--template-id", "0", "--out", out])
        assert code == EXIT_OK
        assert open(out, "rb").read(8) == b"\x89PNG\r\n\x1a\n"
        sidecar = json.loads(open(out + ".json").read())
        assert sidecar["model_fingerprint"] == load_gallery(gal).model_fingerprint
        assert main(["viz", "--config", config, "--seed", "7",
                     "--gallery", gal, "--template-id", "0",
                     "--out", out]) == EXIT_USAGE  # needs --force now

    def test_thread_cap_validation(self, tmp_path, monkeypatch):
        config = write_config(tmp_path)
        monkeypatch.setenv("POSEFUSE_THREADS", "zero")
        assert main(["synth-data", "--config", config, "--seed", "1",
                     "--out", str(tmp_path / "d")]) == EXIT_USAGE
        monkeypatch.setenv("POSEFUSE_THREADS", "0")
        assert main(["synth-data", "--config", config, "--seed", "1",
                     "--out", str(tmp_path / "d")]) == EXIT_USAGE

    def test_divergence_exit_code(self, tmp_path, monkeypatch):
        import torch
        import posefuse.training as training_mod
        config = write_config(tmp_path)
        data = self._synth(tmp_path, config)
        monkeypatch.setattr(
            training_mod, "_batch_loss",
            lambda *a, **k: torch.tensor(float("inf"), dtype=torch.float64))
        import posefuse.cli as cli_mod
        monkeypatch.setattr(cli_mod, "train", training_mod.train)
        ck = str(tmp_path / "ck")
        code = main(["train", "--config", config, "--seed", "7",
                     "--dataset", data, "--epochs", "1", "--out", ck])
        assert code == EXIT_NUMERIC
        # the salvage checkpoint still lands in --out
        assert os.path.isfile(os.path.join(ck, "state.json"))
