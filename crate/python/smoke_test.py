"""Runs the whole pipeline at toy size through the Python bindings."""

import tempfile

import pymmict


def tiny_config(root):
    return pymmict.Config([
        f"data_dir={root}/data",
        f"lm_path={root}/lm.ckpt",
        f"checkpoint={root}/model.ckpt",
        f"out_dir={root}/out",
        "n_f=2",
        "train_samples=24",
        "val_samples=4",
        "test_samples=6",
        "n_q=4",
        "hub_blocks=1",
        "lm_layers=1",
        "pretrain.steps=3",
        "pretrain.batch_size=2",
        "pretrain.warmup_steps=1",
        "epochs=1",
        "warmup_steps=2",
        "max_new_tokens=6",
        "beam_width=2",
    ])


def main():
    ids = pymmict.tokenize("a cat")
    assert pymmict.detokenize(ids) == "a cat"
    assert pymmict.exact_match("A Cat ", "a cat")
    assert abs(pymmict.bleu4(["a cat and a dog"], [["a cat and a dog"]]) - 1.0) < 1e-12

    splits = dict(pymmict.generate_data("icl-map", 16, 2, 4, frames=2, seed=1))
    assert len(splits["train"]) == 16 and len(splits["test"]) == 4
    sample = splits["train"][0]
    assert sample.frames == 2 and sample.label

    with tempfile.TemporaryDirectory() as root:
        cfg = tiny_config(root)
        assert cfg.get("n_f") == "2"
        print(pymmict.gen_data(cfg), end="")
        print(pymmict.pretrain_lm(cfg), end="")
        trained = pymmict.train(cfg)
        report = pymmict.evaluate(cfg, trained)
        assert 0.0 <= report["accuracy"] <= 1.0
        assert len(report["records"]) == 6
        print(f"accuracy {report['accuracy']:.3f}  bleu4 {report['bleu4']:.3f}")

        loaded = pymmict.Model.load(cfg)
        assert loaded.trainable_digest() == trained.trainable_digest()
        assert loaded.backbone_digest() == pymmict.Model.fresh(cfg).backbone_digest()

        data = dict(pymmict.generate_data("describe", 4, 0, 0, frames=2, grid=4))["train"]
        print("generated:", loaded.generate(data[0], data[1:3], with_demos=True))
        symbols = [s for s, _, _ in loaded.layout(data[0], data[1:3])]
        assert symbols[:4] == ["T^c", "EOC", "T^c", "EOC"], symbols

        cfg.set("base_lr", "1e-5")
        cfg.set("warmup_start_lr", "1e-8")
        cfg.set("warmup_steps", "1000")
        assert pymmict.lr_at(cfg, 1250, 0) == 1e-8
        assert pymmict.lr_at(cfg, 1250, 1000) == 1e-5
        assert pymmict.lr_at(cfg, 1250, 1249) == 0.0

        try:
            cfg.set("no_such_key", "1")
        except pymmict.MmictError:
            pass
        else:
            raise AssertionError("unknown keys must be rejected")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
