import json

import pytest

from irflow import cli
from irflow.gradcheck import GradcheckReport
from irflow.pretrain import TrainConfig
from irflow.synthetic import clone_corpus

TINY_CONFIG = TrainConfig.tiny(steps=2, batch_size=3, warmup=1, lr=1e-2).to_text()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    texts, labels = clone_corpus(2, 3, seed=0)
    paths = []
    for i, t in enumerate(texts):
        p = root / f"p{i}.ll"
        p.write_text(t)
        paths.append(str(p))
    (root / "labels.txt").write_text("\n".join(str(y) for y in labels) + "\n")
    (root / "one_class.txt").write_text("x\n" * len(texts))
    (root / "tiny.cfg").write_text(TINY_CONFIG)
    assert cli.run(["train-tokenizer", *paths, "--vocab-size", "72",
                    "--out", str(root / "tok.json")]) == 0
    assert cli.run(["pretrain", *paths, "--tokenizer", str(root / "tok.json"),
                    "--config", str(root / "tiny.cfg"), "--out", str(root / "run")]) == 0
    return root, paths


class TestBuildGraph:
    def test_callpair_flow(self, tmp_path, capsys):
        from pathlib import Path

        fixture = Path(__file__).parent / "fixtures" / "callpair.ll"
        assert cli.run(["build-graph", str(fixture), "--dot", str(tmp_path / "g.dot")]) == 0
        doc = json.loads(capsys.readouterr().out)
        labels = [(b["fn"], b["label"]) for b in doc["bb_nodes"]]
        src, dst = labels.index(("@main", "entry")), labels.index(("@main", "if.end4"))
        assert [src, dst, "br.T"] in doc["cfg_flows"]
        assert '"br.T"' in (tmp_path / "g.dot").read_text()

    def test_emit_dot(self, tmp_path, callpair_text, capsys):
        (tmp_path / "a.ll").write_text(callpair_text)
        cli.run(["build-graph", str(tmp_path / "a.ll"), "--out", str(tmp_path / "a.json")])
        assert cli.run(["emit-dot", str(tmp_path / "a.json")]) == 0
        assert capsys.readouterr().out.startswith("digraph")

    def test_parse_error_exit_1(self, tmp_path, capsys):
        (tmp_path / "bad.ll").write_text("define i32 @f( {\n")
        assert cli.run(["build-graph", str(tmp_path / "bad.ll")]) == 1
        assert "irflow: error: ParseError" in capsys.readouterr().err

    def test_missing_file_exit_1(self, tmp_path):
        assert cli.run(["build-graph", str(tmp_path / "none.ll")]) == 1

    def test_usage_error_exit_2(self):
        with pytest.raises(SystemExit) as e:
            cli.run(["build-graph"])
        assert e.value.code == 2


class TestPipeline:
    def test_pretrain_outputs(self, workspace):
        root, _ = workspace
        lines = (root / "run" / "metrics.jsonl").read_text().splitlines()
        assert [json.loads(x)["step"] for x in lines] == [0, 1]
        assert (root / "run" / "final.ckpt").exists()

    def test_resume(self, workspace):
        root, paths = workspace
        out = root / "resumed"
        assert cli.run(["pretrain", *paths, "--resume", str(root / "run" / "final.ckpt"),
                        "--out", str(out)]) == 0
        assert not (out / "metrics.jsonl").read_text().strip()

    def test_embed_and_retrieve(self, workspace, capsys):
        root, paths = workspace
        emb = root / "emb.jsonl"
        assert cli.run(["embed", *paths, "--checkpoint", str(root / "run" / "final.ckpt"),
                        "--labels", str(root / "labels.txt"), "--out", str(emb)]) == 0
        rows = [json.loads(x) for x in emb.read_text().splitlines()]
        assert len(rows) == len(paths) and len(rows[0]["v"]) == 16
        capsys.readouterr()
        assert cli.run(["retrieve", str(emb), "-R", "2"]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["R"] == 2 and 0 <= report["map_at_r"] <= 1

    def test_retrieve_one_class(self, workspace, capsys):
        root, paths = workspace
        emb = root / "emb1.jsonl"
        cli.run(["embed", *paths, "--checkpoint", str(root / "run" / "final.ckpt"),
                 "--labels", str(root / "one_class.txt"), "--out", str(emb)])
        cli.run(["embed", paths[0], "--checkpoint", str(root / "run" / "final.ckpt"),
                 "--out", str(root / "single.jsonl")])
        assert cli.run(["retrieve", str(root / "single.jsonl")]) == 1
        assert "DegenerateClass" in capsys.readouterr().err

    def test_label_count_mismatch(self, workspace):
        root, paths = workspace
        assert cli.run(["embed", *paths[:2], "--checkpoint", str(root / "run" / "final.ckpt"),
                        "--labels", str(root / "labels.txt"), "--out", str(root / "x")]) == 1

    def test_classify(self, workspace, capsys):
        root, paths = workspace
        capsys.readouterr()
        assert cli.run(["classify", "--train", *paths, "--train-labels", str(root / "labels.txt"),
                        "--valid", *paths, "--valid-labels", str(root / "labels.txt"),
                        "--checkpoint", str(root / "run" / "final.ckpt"), "--steps", "3"]) == 0
        assert 0 <= json.loads(capsys.readouterr().out)["error_rate"] <= 1

    def test_classify_valid_pairing(self, workspace):
        root, paths = workspace
        with pytest.raises(SystemExit):
            cli.run(["classify", "--train", *paths, "--train-labels", str(root / "labels.txt"),
                     "--valid", *paths, "--checkpoint", "x"])

    def test_bad_override(self, workspace):
        root, paths = workspace
        assert cli.run(["pretrain", *paths, "--tokenizer", str(root / "tok.json"),
                        "--set", "bogus=1", "--out", str(root / "bad")]) == 1


class TestGradcheckCommand:
    @pytest.mark.parametrize("err,code", [(1e-6, 0), (1e-2, 1)])
    def test_exit_code(self, monkeypatch, capsys, err, code):
        import irflow.gradcheck as gc

        monkeypatch.setattr(gc, "run_gradcheck",
                            lambda seed, eps: GradcheckReport({"w": err}, 10, 20, 0.1))
        assert cli.run(["gradcheck"]) == code
        assert "max relative error" in capsys.readouterr().out
