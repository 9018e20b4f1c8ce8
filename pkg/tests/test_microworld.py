import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from answercritic.microworld import (
    DatasetError,
    Scene,
    SceneObject,
    WorldConfig,
    derive_answer,
    generate_dataset,
    load_dataset,
    parse_question,
    render_question,
    render_rationale,
    save_dataset,
)
from helpers import answer_from_rationale


def scene_of(*objs, scene_id=0):
    return Scene(scene_id=scene_id, objects=tuple(SceneObject(*o) for o in objs))


RED_CIRCLE = scene_of((0, 0, "circle", "red", "big"))
TWO_CIRCLES = scene_of((0, 0, "circle", "red", "big"), (2, 2, "circle", "blue", "small"))


class TestGrammar:
    def test_color_question(self):
        assert render_question(RED_CIRCLE, "COLOR", 0) == (
            "what", "color", "is", "the", "circle", "?",
        )

    def test_exist_question(self):
        scene = scene_of((1, 1, "square", "blue", "small"))
        assert render_question(scene, "EXIST", ("green", "triangle")) == (
            "is", "there", "a", "green", "triangle", "?",
        )

    def test_count_question_and_answer(self):
        q = render_question(TWO_CIRCLES, "COUNT", "circle")
        assert q == ("how", "many", "circle", "are", "there", "?")
        assert derive_answer(TWO_CIRCLES, q) == ("2",)

    def test_ambiguous_color_target_rejected(self):
        with pytest.raises(DatasetError, match="ambiguous"):
            render_question(TWO_CIRCLES, "COLOR", 0)

    def test_color_rationale(self):
        q = render_question(RED_CIRCLE, "COLOR", 0)
        assert render_rationale(RED_CIRCLE, q, ("red",)) == (
            "because", "the", "circle", "is", "red",
        )

    def test_exist_no_rationale(self):
        q = render_question(RED_CIRCLE, "EXIST", ("green", "triangle"))
        assert render_rationale(RED_CIRCLE, q, ("no",)) == (
            "because", "no", "object", "is", "a", "green", "triangle",
        )

    def test_count_rationale(self):
        q = render_question(TWO_CIRCLES, "COUNT", "circle")
        assert render_rationale(TWO_CIRCLES, q, ("2",)) == (
            "because", "there", "are", "2", "circle",
        )

    def test_parse_question_inverts_render(self):
        q = render_question(RED_CIRCLE, "SHAPE", 0)
        assert parse_question(q) == ("SHAPE", ("red",))
        with pytest.raises(DatasetError, match="grammar"):
            parse_question(("what", "gives", "?"))


class TestGeneration:
    def test_deterministic(self, tiny_world, tiny_splits):
        again = generate_dataset(tiny_world)
        assert again == tiny_splits

    def test_all_labelled_when_no_unlabelled(self):
        config = WorldConfig(seed=3, n_labelled=10, n_unlabelled=0)
        for split in generate_dataset(config):
            assert all(s.labelled for s in split)

    def test_default_scale_counts(self):
        config = WorldConfig(seed=7, n_labelled=500, n_unlabelled=2000)
        train, val, test = generate_dataset(config)
        samples = train + val + test
        assert len(samples) == 2500
        assert sum(1 for s in samples if s.rationale is None) == 2000
        assert sum(1 for s in samples if s.labelled) == 500

    def test_split_by_sample_id(self, tiny_splits):
        train, val, test = tiny_splits
        assert all(s.sample_id % 10 < 8 for s in train)
        assert all(s.sample_id % 10 == 8 for s in val)
        assert all(s.sample_id % 10 == 9 for s in test)

    def test_answers_rederivable(self, tiny_splits):
        for split in tiny_splits:
            for s in split:
                assert derive_answer(s.scene, s.question) == s.answer

    def test_rationales_entail_answers(self, tiny_splits):
        for split in tiny_splits:
            for s in split:
                if s.labelled:
                    assert answer_from_rationale(s.question, s.rationale) == s.answer

    @pytest.mark.parametrize(
        "kwargs, field",
        [
            (dict(shapes=()), "shapes"),
            (dict(colors=("red", "red")), "colors"),
            (dict(max_objects=0), "max_objects"),
            (dict(n_labelled=0, n_unlabelled=0), "n_labelled"),
            (dict(question_kinds=("HUH",)), "question_kinds"),
        ],
    )
    def test_invalid_config_names_field(self, kwargs, field):
        with pytest.raises(DatasetError, match=field):
            generate_dataset(WorldConfig(**kwargs))

    @settings(max_examples=15, deadline=None)
    @given(
        seed=st.integers(0, 10_000),
        n_labelled=st.integers(1, 8),
        n_unlabelled=st.integers(0, 8),
        max_objects=st.integers(1, 3),
    )
    def test_generation_properties(self, seed, n_labelled, n_unlabelled, max_objects):
        config = WorldConfig(
            seed=seed,
            n_labelled=n_labelled,
            n_unlabelled=n_unlabelled,
            max_objects=max_objects,
        )
        splits = generate_dataset(config)
        samples = [s for split in splits for s in split]
        assert len(samples) == n_labelled + n_unlabelled
        assert sum(s.labelled for s in samples) == n_labelled
        for s in samples:
            assert s.labelled == (s.rationale is not None)
            assert 1 <= len(s.scene.objects) <= max_objects
            assert derive_answer(s.scene, s.question) == s.answer
            if s.labelled:
                assert answer_from_rationale(s.question, s.rationale) == s.answer
        assert generate_dataset(config) == splits  # pure function of config


class TestSerialization:
    def test_round_trip(self, tiny_splits, tmp_path):
        samples = [s for split in tiny_splits for s in split]
        path = tmp_path / "data.jsonl"
        save_dataset(samples, path)
        assert load_dataset(path) == samples

    def test_rerun_byte_identical(self, tiny_world, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_dataset(generate_dataset(tiny_world)[0], a)
        save_dataset(generate_dataset(tiny_world)[0], b)
        assert a.read_bytes() == b.read_bytes()

    def test_unlabelled_records_have_no_rationale_key(self, tiny_splits, tmp_path):
        samples = [s for split in tiny_splits for s in split]
        path = tmp_path / "data.jsonl"
        save_dataset(samples, path)
        for line, sample in zip(path.read_text().splitlines(), samples):
            record = json.loads(line)
            assert ("rationale" in record) == sample.labelled

    def test_truncated_final_line_cites_line_number(self, tiny_splits, tmp_path):
        samples = tiny_splits[0][:3]
        path = tmp_path / "data.jsonl"
        save_dataset(samples, path)
        text = path.read_text().rstrip("\n")
        path.write_text(text[:-20])
        with pytest.raises(DatasetError, match="line 3"):
            load_dataset(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert load_dataset(path) == []

    def test_unknown_token_named(self, tiny_splits, tmp_path):
        path = tmp_path / "bad.jsonl"
        save_dataset(tiny_splits[0][:1], path)
        record = json.loads(path.read_text())
        record["question"] = "what color is the Zork ?"
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(DatasetError, match="Zork"):
            load_dataset(path)

    def test_missing_field_named(self, tiny_splits, tmp_path):
        path = tmp_path / "bad.jsonl"
        record = json.loads(save_dataset(tiny_splits[0][:1], path) or path.read_text())
        del record["answer"]
        path.write_text(json.dumps(record) + "\n")
        with pytest.raises(DatasetError, match="answer"):
            load_dataset(path)
