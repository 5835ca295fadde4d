import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpscl import losses as L
from mpscl import training as T
from mpscl.data import SceneDataset, TargetMaskAccessError
from mpscl.pseudo_labels import LabelMap


# ------------------------------------------------------------------- config

def test_config_defaults():
    cfg = T.TrainConfig()
    assert (cfg.alpha, cfg.delta_th, cfg.m, cfg.tau) == (0.2, 0.25, 0.4, 1.0)
    assert (cfg.gamma, cfg.beta, cfg.lam) == (1.0, 0.1, 0.003)
    assert (cfg.lr_g, cfg.momentum_g, cfg.weight_decay_g, cfg.lr_d) == (2.5e-4, 0.9, 1e-4, 1e-4)


@pytest.mark.parametrize("bad", [{"lr_g": 0}, {"alpha": 1.5}, {"phase1_iters": 0}, {"tau": -1},
                                 {"contrast_reduction": "max"}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        T.TrainConfig(**bad)


def test_config_text_roundtrip():
    cfg = T.TrainConfig(lam=0.01, m=0.2, proto_use_target=True, seed=7)
    text = T.dump_config(cfg)
    assert "lambda=0.01" in text
    assert T.TrainConfig(**T.parse_config_text(text)) == cfg


def test_config_parse_comments_and_errors():
    vals = T.parse_config_text("# header\nlambda = 0.5  # weight\n\nseed=3\n")
    assert vals == {"lam": 0.5, "seed": 3}
    with pytest.raises(ValueError, match="unknown config key"):
        T.parse_config_text("nope=1")
    with pytest.raises(ValueError):
        T.parse_config_text("seed")


# ---------------------------------------------------------------- optimizers

def test_sgd_zero_grad_no_decay_is_noop():
    p = [np.array([1.0, -2.0])]
    T.sgd_momentum_step(p, [np.zeros(2)], [np.zeros(2)], 0.1, 0.9, 0.0)
    assert p[0].tolist() == [1.0, -2.0]


def test_sgd_plain_step():
    p = [np.array([1.0])]
    T.sgd_momentum_step(p, [np.array([0.5])], [np.zeros(1)], 0.1, 0.0, 0.0)
    assert p[0][0] == pytest.approx(0.95)


def test_sgd_two_step_displacement():
    p, v = [np.array([0.0])], [np.zeros(1)]
    for _ in range(2):
        T.sgd_momentum_step(p, [np.array([2.0])], v, 0.01, 0.9, 0.0)
    assert p[0][0] == pytest.approx(-0.01 * 2.0 * (1 + 1.9), rel=1e-14)


def test_adam_zero_grad_first_step():
    p = [np.array([0.3])]
    T.adam_step(p, [np.zeros(1)], [np.zeros(1)], [np.zeros(1)], 1, 1e-3)
    assert p[0][0] == 0.3


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10).filter(lambda x: abs(x) > 1e-3), min_size=1, max_size=6))
def test_adam_first_step_sign(grads):
    g = np.array(grads)
    p = [np.zeros_like(g)]
    T.adam_step(p, [g], [np.zeros_like(g)], [np.zeros_like(g)], 1, 1e-3)
    assert np.all(np.sign(p[0]) == -np.sign(g))


def test_adam_constant_gradient_step_tends_to_lr():
    g = np.array([0.3, -5.0])
    p, m1, m2 = [np.zeros(2)], [np.zeros(2)], [np.zeros(2)]
    for t in range(1, 20001):
        before = p[0].copy()
        T.adam_step(p, [g], m1, m2, t, 1e-3)
    np.testing.assert_allclose(np.abs(p[0] - before), 1e-3, rtol=1e-4)


# ----------------------------------------------------------------- steps

def _batch(tiny_data):
    ds = SceneDataset(tiny_data)
    return (ds.images("train", "A")[:2], ds.masks("train", "A")[:2]), ds.images("train", "B")[:2], ds


def test_phase2_requires_prototypes(tiny_data, tiny_cfg):
    src, trg, _ = _batch(tiny_data)
    with pytest.raises(RuntimeError, match="bootstrap"):
        T.phase2_step(src, trg, T.TrainState.create(tiny_cfg), tiny_cfg)


def test_phase2_with_zero_weights_matches_phase1(tiny_data, tiny_cfg):
    src, trg, ds = _batch(tiny_data)
    cfg = tiny_cfg.replace(gamma=0.0, beta=0.0)
    a, b = T.TrainState.create(cfg), T.TrainState.create(cfg)
    protos = T.bootstrap_prototypes(a.generator, ds.images("train", "A"), ds.masks("train", "A"), cfg)
    b.prototypes = protos
    for _ in range(3):
        la = T.phase1_step(src, trg, a, cfg)
        lb = T.phase2_step(src, trg, b, cfg)
        assert (la["seg"], la["adv"], la["d"]) == (lb["seg"], lb["adv"], lb["d"])
    for k in a.generator.params:
        assert a.generator.params[k].data.tobytes() == b.generator.params[k].data.tobytes()
    assert b.prototypes.iteration == 3


def test_unassigned_target_gives_zero_target_term(tiny_data, tiny_cfg):
    src, trg, ds = _batch(tiny_data)
    cfg = tiny_cfg.replace(delta_th=2.0)
    st = T.TrainState.create(cfg)
    st.prototypes = T.bootstrap_prototypes(st.generator, ds.images("train", "A"), ds.masks("train", "A"), cfg)
    out = T.phase2_step(src, trg, st, cfg)
    assert out["c_trg"] == 0.0 and out["c_src"] > 0


def test_discriminator_alone_beats_chance(tiny_data, tiny_cfg):
    src, trg, _ = _batch(tiny_data)
    st = T.TrainState.create(tiny_cfg.replace(lr_d=1e-3))
    with T.nx.no_grad():
        _, ps = st.generator(src[0])
        _, pt = st.generator(trg)
    i_s, i_t = L.self_information_map(ps), L.self_information_map(pt)
    for _ in range(200):
        loss = L.discriminator_loss(i_s, i_t, st.discriminator)
        st.discriminator.zero_grad()
        loss.backward()
        st.opt_d.step()
    assert L.discriminator_loss(i_s, i_t, st.discriminator).item() < math.log(2)


def test_single_generator_step_descends(tiny_data, tiny_cfg):
    ds = SceneDataset(tiny_data)
    xs, ms, xt = ds.images("train", "A"), ds.masks("train", "A"), ds.images("train", "B")
    rng = np.random.default_rng(0)
    cfg = tiny_cfg
    st = T.TrainState.create(cfg)
    protos = T.bootstrap_prototypes(st.generator, xs, ms, cfg)

    def total():
        f_s, p_s = st.generator(xs[si])
        f_t, p_t = st.generator(xt[ti])
        y = LabelMap.from_indices(ms[si], 5)
        labels_t, _ = T.assign_pseudo_labels(T.cosine_scores(f_t.detach(), protos), cfg.delta_th, shape=(2, 16, 16))
        adv = L.generator_adversarial_loss(L.self_information_map(p_t), st.discriminator)
        return L.total_generator_loss(L.segmentation_loss(p_s, y), L.margin_contrastive_loss(f_s, y, protos),
                                      L.margin_contrastive_loss(f_t, labels_t, protos), adv,
                                      cfg.gamma, cfg.beta, cfg.lam)

    for _ in range(20):
        si, ti = rng.choice(6, 2, replace=False), rng.choice(6, 2, replace=False)
        opt = T.SGD(st.generator, 1e-5, 0.0, 0.0)
        before = total()
        st.generator.zero_grad()
        before.backward()
        opt.step()
        with T.nx.no_grad():
            after = total()
        assert after.item() <= before.item() + 1e-12


# ------------------------------------------------------------- checkpoint

def test_checkpoint_roundtrip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)), "b/c": rng.normal(size=()), "e": rng.normal(size=(2, 0, 3))}
    raw = T.encode_checkpoint(42, "seed=1\n", {"k": "v"}, tensors)
    it, cfg, meta, back = T.decode_checkpoint(raw)
    assert (it, cfg, meta) == (42, "seed=1\n", {"k": "v"})
    for k in tensors:
        assert back[k].shape == tensors[k].shape and back[k].tobytes() == tensors[k].tobytes()
    assert raw[:4] == b"MPSC"


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_checkpoint_corruption_detected(mutate, rng):
    raw = T.encode_checkpoint(1, "", {}, {"w": rng.normal(size=(2, 2))})
    with pytest.raises(T.CheckpointError):
        T.decode_checkpoint(mutate(raw))


def test_state_checkpoint_roundtrip(tiny_data, tiny_cfg, tmp_path):
    src, trg, ds = _batch(tiny_data)
    st = T.TrainState.create(tiny_cfg)
    T.phase1_step(src, trg, st, tiny_cfg)
    st.prototypes = T.bootstrap_prototypes(st.generator, ds.images("train", "A"), ds.masks("train", "A"), tiny_cfg)
    T.phase2_step(src, trg, st, tiny_cfg)
    st.iteration = 2
    T.save_checkpoint(tmp_path / "c.mpsc", st)
    back = T.load_checkpoint(tmp_path / "c.mpsc")
    assert back.cfg == st.cfg and back.iteration == 2 and back.opt_d.t == st.opt_d.t
    assert back.prototypes.vectors.tobytes() == st.prototypes.vectors.tobytes()
    assert back.prototypes.iteration == st.prototypes.iteration
    for k in st.generator.params:
        assert back.generator.params[k].data.tobytes() == st.generator.params[k].data.tobytes()
        assert back.opt_g.velocity[k].tobytes() == st.opt_g.velocity[k].tobytes()
    for k in st.discriminator.params:
        assert back.opt_d.m2[k].tobytes() == st.opt_d.m2[k].tobytes()


# ------------------------------------------------------------------ train

def test_train_outputs(tiny_cfg):
    res = T.train(tiny_cfg)
    lines = res.loss_curve.read_text().splitlines()
    assert lines[0] == "iteration,seg,c_src,c_trg,adv,d,val_dice"
    assert len(lines) - 1 == tiny_cfg.total_iters
    assert 1 <= res.best_iteration <= tiny_cfg.total_iters
    assert res.best_checkpoint.is_file() and res.last_checkpoint.is_file()
    last = T.load_checkpoint(res.last_checkpoint)
    assert last.iteration == tiny_cfg.total_iters and last.prototypes.iteration == tiny_cfg.phase2_iters


def test_train_is_deterministic(tiny_cfg, tmp_path):
    a = T.train(tiny_cfg, out_dir=tmp_path / "a")
    b = T.train(tiny_cfg, out_dir=tmp_path / "b")
    for name in ("loss_curve.csv", "checkpoint_last.mpsc", "checkpoint_best.mpsc"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("stop", [2, 4])
def test_resume_reproduces_uninterrupted_run(tiny_cfg, tmp_path, stop):
    full = T.train(tiny_cfg, out_dir=tmp_path / "full")
    T.train(tiny_cfg, out_dir=tmp_path / "part", until=stop)
    T.train(tiny_cfg, out_dir=tmp_path / "part", resume=tmp_path / "part" / "checkpoint_last.mpsc")
    for name in ("loss_curve.csv", "checkpoint_last.mpsc"):
        assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "part" / name).read_bytes()


def test_train_never_reads_target_training_masks(tiny_cfg, monkeypatch):
    seen = []
    original = SceneDataset.masks

    def spy(self, split, domain):
        seen.append((self.role, split, domain))
        return original(self, split, domain)

    monkeypatch.setattr(SceneDataset, "masks", spy)
    T.train(tiny_cfg)
    assert ("train", "train", "B") not in seen
    assert all(not (d == "B" and s == "train") for _, s, d in seen)
    assert all(r == "eval" for r, s, d in seen if d == "B")


def test_source_only_config_runs(tiny_cfg):
    res = T.train(tiny_cfg.replace(lam=0.0, beta=0.0, gamma=0.0))
    assert res.best_val_dice >= 0


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        T.train(T.TrainConfig(data_dir=str(tmp_path)), out_dir=tmp_path / "o")


def test_nan_abort_dumps_batch(tiny_cfg, monkeypatch, tmp_path):
    monkeypatch.setattr(T.L, "segmentation_loss", lambda *a, **k: T.nx.Tensor(np.array(np.nan)))
    with pytest.raises(T.NumericalAbort) as err:
        T.train(tiny_cfg, out_dir=tmp_path / "nan")
    dump = err.value.dump_path
    assert dump is not None and dump.is_file()
    assert set(np.load(dump).files) == {"src_images", "src_masks", "trg_images"}
