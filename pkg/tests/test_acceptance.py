"""Acceptance criteria 1-10, one test each.

Every test prints a single ``criterion N PASS|FAIL`` line (also collected in
the terminal summary) and then asserts the outcome.
"""
import itertools
import math
import time
from fractions import Fraction

import numpy as np

from conftest import ACCEPTANCE_LINES
from snet import data as D
from snet import fusion, info, nn
from snet import losses as L
from snet import model as M
from snet import tensor as T
from snet import train as TR
from snet.formats import decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor
from snet.gradcheck import check_gradients
from snet.tensor import Tensor


def verdict(number, title, ok, started, budget_s, detail=""):
    elapsed = time.perf_counter() - started
    ok = bool(ok) and elapsed <= budget_s
    line = (f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} "
            f"[{elapsed:.1f}s / {budget_s:.0f}s] {detail}").rstrip()
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def leaf(rng, *shape, scale=1.0, positive=False):
    x = rng.standard_normal(shape) * scale
    return Tensor(np.abs(x) + 0.5 if positive else x, requires_grad=True)


# --- 1 ---------------------------------------------------------------------------

def primitive_checks(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    pos = leaf(rng, 2, 3, positive=True)
    row = leaf(rng, 1, 3)
    w = rng.standard_normal((2, 3))
    img = leaf(rng, 2, 3, 4, 4)
    kern = leaf(rng, 4, 3, 3, 3)
    dw = leaf(rng, 3, 1, 3, 3)
    bias = leaf(rng, 4)
    sc, sh = leaf(rng, 3), leaf(rng, 3)
    tok = leaf(rng, 2, 5, 4)
    lsc, lsh = leaf(rng, 4), leaf(rng, 4)
    m1, m2 = leaf(rng, 2, 3, 4), leaf(rng, 2, 4, 2)
    # keep relu/gelu inputs 1e-3 away from the kink region
    kinky = Tensor(np.where(np.abs(a.data) < 1e-3, 0.5, a.data), requires_grad=True)

    def s(t):  # fixed random projection to a scalar
        return T.tsum(t * np.random.default_rng(99).standard_normal(t.shape))
    cases = {
        "add": (lambda: T.tsum((a + row) * w), [a, row]),
        "sub": (lambda: T.tsum((a - b) * w), [a, b]),
        "mul": (lambda: T.tsum(a * b * w), [a, b]),
        "div": (lambda: T.tsum(a / pos * w), [a, pos]),
        "power": (lambda: T.tsum(T.power(pos, 2.5) * w), [pos]),
        "exp": (lambda: T.tsum(T.exp(a) * w), [a]),
        "log": (lambda: T.tsum(T.log(pos) * w), [pos]),
        "sigmoid": (lambda: T.tsum(T.sigmoid(a) * w), [a]),
        "softplus": (lambda: T.tsum(T.softplus(a) * w), [a]),
        "relu": (lambda: T.tsum(T.relu(kinky) * w), [kinky]),
        "gelu": (lambda: T.tsum(T.gelu(kinky) * w), [kinky]),
        "mean": (lambda: T.tsum(T.mean(a, axis=0) * w[0]), [a]),
        "reshape/transpose": (lambda: T.tsum(T.transpose(T.reshape(a, (3, 2))) * w), [a]),
        "concat/split": (lambda: T.tsum(T.split(T.concat([a, b], axis=1), [4, 2], axis=1)[0]
                                        * np.ones((2, 4))), [a, b]),
        "upsample": (lambda: T.tsum(T.upsample_nearest(img, 2) * 0.5), [img]),
        "matmul": (lambda: T.tsum(T.matmul(m1, m2) * 0.7), [m1, m2]),
        "softmax": (lambda: T.tsum(T.softmax(a) * w), [a]),
        "log_softmax": (lambda: T.tsum(T.log_softmax(a) * w), [a]),
        "batch_norm": (lambda: s(T.batch_norm(img, sc, sh)), [img, sc, sh]),
        "layer_norm": (lambda: s(T.layer_norm(tok, lsc, lsh)), [tok, lsc, lsh]),
        "conv2d": (lambda: s(T.conv2d(img, kern, bias, stride=2, padding=1)), [img, kern, bias]),
        "conv2d depthwise": (lambda: s(T.conv2d(img, dw, padding=1, groups=3)), [img, dw]),
    }
    out = {}
    for name, (fn, params) in cases.items():
        out[name] = check_gradients(fn, params)
    return out


def block_checks(rng):
    out = {}
    ps = nn.ParamSet(1)
    fusion.init_feb(ps, 2, 4)
    f_i, f_j = leaf(rng, 1, 2, 4, 4), leaf(rng, 1, 4, 2, 2)
    w1, w2 = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 4, 2, 2))

    def feb():
        a, b = fusion.feb_forward(f_i, f_j, ps)
        return T.tsum(a * w1) + T.tsum(b * w2)
    out["FEB"] = check_gradients(feb, [f_i, f_j] + list(ps.params.values()), max_entries=16)

    ps = nn.ParamSet(2)
    fusion.init_ffb(ps, 1)
    f_c, f_t = leaf(rng, 2, 4, 3, 3), leaf(rng, 2, 1, 3, 3)
    w = rng.standard_normal((2, 2, 3, 3))
    out["FFB"] = check_gradients(lambda: T.tsum(fusion.ffb_forward(f_c, f_t, ps) * w),
                                 [f_c, f_t] + list(ps.params.values()))

    ps = nn.ParamSet(3)
    fusion.init_gab(ps, 4, 6)
    for name in ("wq", "wk", "wv"):
        ps[name].data = rng.standard_normal(ps[name].shape) * 0.3
    g1, g2 = leaf(rng, 1, 4, 2, 2), leaf(rng, 1, 6, 1, 1)
    w = rng.standard_normal((1, 4, 2, 2))
    out["GAB"] = check_gradients(lambda: T.tsum(fusion.gab_forward(g1, g2, ps) * w),
                                 [g1, g2] + list(ps.params.values()))

    cfg = M.NetworkConfig(base_width=2, num_classes=3)
    model = M.build(cfg, 4)
    x = rng.standard_normal((2, 1, 64, 64))
    y = rng.integers(0, 3, (2, 64, 64))

    def snet_loss():
        y_hat, y_hat_f, _ = M.forward(model, x, training=True)
        return L.combined_objective(y_hat, y_hat_f, y)[0]
    out["SNet loss"] = check_gradients(snet_loss, list(model.params.params.values()),
                                       max_entries=3)
    return out


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errors = {**primitive_checks(rng), **block_checks(rng)}
    worst = max(errors, key=errors.get)
    verdict(1, "gradient suite", errors[worst] <= 1e-4, t0, 300,
            f"({len(errors)} checks, worst {worst} {errors[worst]:.2e})")


# --- 2 ---------------------------------------------------------------------------

def conv_oracle(x, w, stride, padding):
    b, c, h, wd = x.shape
    f, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh, ow = (h + 2 * padding - k) // stride + 1, (wd + 2 * padding - k) // stride + 1
    out = np.zeros((b, f, oh, ow))
    for n in range(b):
        for o in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, o, i, j] = (patch * w[o]).sum()
    return out


def matmul_oracle(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def attention_oracle(tok, w, heads):
    c = tok.shape[-1]
    dh = c // heads
    q, k, v = (tok @ w[f"{n}.weight"] + w[f"{n}.bias"] for n in ("wq", "wk", "wv"))
    cat = [softmax(q[:, h * dh:(h + 1) * dh] @ k[:, h * dh:(h + 1) * dh].T / math.sqrt(dh))
           @ v[:, h * dh:(h + 1) * dh] for h in range(heads)]
    return np.concatenate(cat, axis=1) @ w["wo.weight"] + w["wo.bias"]


def bn_oracle(x):
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        vals = x[:, c].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        out[:, c] = (x[:, c] - mu) / math.sqrt(var + 1e-5)
    return out


def hd_oracle(a, b, percentile):
    pa, pb = np.argwhere(L.boundary(a)), np.argwhere(L.boundary(b))
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    da, db = d.min(axis=1), d.min(axis=0)
    if percentile == 100:
        return max(da.max(), db.max())
    return max(np.percentile(da, percentile), np.percentile(db, percentile))


def test_criterion_02_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    n = 100
    worst = {"conv2d": 0.0, "matmul": 0.0, "attention": 0.0, "batch_norm": 0.0}
    hd_mismatch = 0
    for i in range(n):
        stride, padding = 1 + i % 2, i % 3 // 2
        x, w = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((4, 3, 3, 3))
        got = T.conv2d(Tensor(x), Tensor(w), stride=stride, padding=padding).data
        want = conv_oracle(x, w, stride, padding)
        worst["conv2d"] = max(worst["conv2d"],
                              float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1e-6))))

        a, b = rng.standard_normal((rng.integers(1, 5), 3)), rng.standard_normal((3, 4))
        worst["matmul"] = max(worst["matmul"], float(np.abs(
            T.matmul(Tensor(a), Tensor(b)).data - matmul_oracle(a, b)).max()))

        heads = 1 + i % 2
        ps = nn.ParamSet(i)
        nn.init_attention(ps, 8, heads)
        for p in ps.params.values():
            p.data = rng.standard_normal(p.shape) * 0.5
        tok = rng.standard_normal((1, 4, 8))
        got = nn.mhsa(Tensor(tok), ps, heads).data[0]
        want = attention_oracle(tok[0], {k: p.data for k, p in ps.params.items()}, heads)
        worst["attention"] = max(worst["attention"], float(np.abs(got - want).max()))

        x = rng.standard_normal((4, 3, 5, 5))
        got = T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
        worst["batch_norm"] = max(worst["batch_norm"], float(np.abs(got - bn_oracle(x)).max()))

        ma, mb = rng.uniform(size=(16, 16)) > 0.7, rng.uniform(size=(16, 16)) > 0.6
        for pct in (95, 100):
            hd_mismatch += L.hausdorff(ma, mb, pct) != hd_oracle(ma, mb, pct)
    tol = {"conv2d": 1e-6, "matmul": 1e-12, "attention": 1e-10, "batch_norm": 1e-6}
    ok = all(worst[k] <= tol[k] for k in tol) and hd_mismatch == 0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, "oracle equivalence", ok, t0, 300,
            f"({n} instances each; {detail}; hausdorff mismatches {hd_mismatch})")


# --- 3 ---------------------------------------------------------------------------

def test_criterion_03_entropy_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    identity_gap = 0.0
    for _ in range(1000):
        na = int(rng.integers(2, 7))
        nb = int(rng.integers(2, 7))
        p = rng.dirichlet(np.ones(na * nb)).reshape(na, nb)
        h_a, h_b, h_ab, mi = info.table_entropies(p)
        identity_gap = max(identity_gap, abs(h_a + h_b - mi - h_ab))
    han_bad = 0
    for _ in range(500):
        d, k = int(rng.integers(1, 7)), int(rng.integers(2, 4))
        rows = rng.integers(0, k, (int(rng.integers(4, 80)), d))
        if d > 1 and rng.random() < 0.5:
            rows[:, -1] = rows[:, 0]
        vals = [v for _, v in info.han_curve(info.DiscreteSampleSet(rows, (k,) * d))]
        han_bad += any(b > a + 1e-9 for a, b in zip(vals, vals[1:]))
    iid = [v for _, v in info.han_curve(info.DiscreteSampleSet(
        np.array(list(itertools.product([0, 1], repeat=3))), (2, 2, 2)))]
    dup = [v for _, v in info.han_curve(info.DiscreteSampleSet(np.array([[0] * 3, [1] * 3])))]
    exact = (np.allclose(iid, [1, 1, 1], rtol=0, atol=1e-12)
             and np.allclose(dup, [1, 0.5, 1 / 3], rtol=0, atol=1e-12))
    jensen_bad = 0
    for _ in range(500):
        ka, kb, kf = (int(v) for v in rng.integers(2, 6, 3))
        table = rng.integers(0, kf, (ka, kb))
        a, b = rng.integers(0, ka, 200), rng.integers(0, kb, 200)
        jensen_bad += not info.jensen_bound_check(a, b, lambda x, y: int(table[x, y]))[2]
    ok = identity_gap <= 1e-9 and han_bad == 0 and exact and jensen_bad == 0
    verdict(3, "entropy identities", ok, t0, 300,
            f"(entropy identity max residual {identity_gap:.1e}; han violations {han_bad}/500; exact curves {exact}; "
            f"jensen violations {jensen_bad}/500)")


# --- 4 ---------------------------------------------------------------------------

def test_criterion_04_regimes():
    t0 = time.perf_counter()
    hits = {"above": 0, "equal": 0, "below": 0}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        a, b = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        hits["above"] += info.fusion_regime_sim("independent", a, b, n=a + b - 1,
                                             seed=seed).case == "above"
        hits["equal"] += info.fusion_regime_sim("correlated", a, b, shared=min(a, b) // 2,
                                             seed=seed).case == "equal"
        hits["below"] += info.fusion_regime_sim("dependent", a, b, n=max(a, b) + 1,
                                             seed=seed).case == "below"
    ok = all(v >= 95 for v in hits.values())
    verdict(4, "regime inequality directions", ok, t0, 300,
            f"(independent->above {hits['above']}%, matched->equal {hits['equal']}%, "
            f"dependent->below {hits['below']}%)")


# --- 5 ---------------------------------------------------------------------------

def test_criterion_05_shape_contracts():
    t0 = time.perf_counter()
    problems = []
    rng = np.random.default_rng(5)
    for d in (4, 8, 16, 32):
        ps = nn.ParamSet(d)
        fusion.init_ffb(ps, d)
        trace = []
        out = fusion.ffb_forward(Tensor(rng.standard_normal((1, 4 * d, 2, 2))),
                                 Tensor(rng.standard_normal((1, d, 2, 2))), ps,
                                 channel_trace=trace)
        if trace != [5 * d, 2 * d, 6 * d, 2 * d] or out.shape != (1, 2 * d, 2, 2):
            problems.append(f"ffb d={d}: {trace}")
    ps = nn.ParamSet(0)
    fusion.init_feb(ps, 4, 8)
    fi, fj = rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((2, 8, 4, 4))
    a, b = fusion.feb_forward(Tensor(fi), Tensor(fj), ps)
    if a.shape != fi.shape or b.shape != fj.shape:
        problems.append("feb shapes")
    for h, w, c, mode in itertools.product((32, 64, 96), (32, 64), (4, 8), ("stagger", "unstagger")):
        cfg = M.NetworkConfig(input_size=(h, w), base_width=c, fusion_mode=mode,
                              dtype="float32", num_classes=5)
        x = rng.standard_normal((1, 1, h, w))
        y, yf, _ = M.forward(M.build(cfg), x)
        if y.shape != (1, 5, h, w) or yf.shape != (1, 5, h, w):
            problems.append(f"heads {h}x{w} c={c} {mode}")
        if mode == "stagger" and not all(p.cnn_stage > p.vit_stage for p in cfg.fusion_pairs):
            problems.append("stagger invariant")
    try:
        fusion.FusionPair(2, 3)
        problems.append("FusionPair(2, 3) accepted")
    except Exception:
        pass
    verdict(5, "shape and contract suite", not problems, t0, 120,
            "(" + ("; ".join(problems) or "24 network configs, 4 FFB widths") + ")")


# --- 6 ---------------------------------------------------------------------------

def test_criterion_06_loss_semantics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(20):
        a, b = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((2, 3, 6, 6))
        y = rng.integers(0, 3, (2, 6, 6))
        loss, p = L.combined_objective(Tensor(a), Tensor(b), y)
        worst = max(worst, abs(loss.item() - (0.6 * p["bce_f"] + 0.4 * p["dice_f"]
                                              + 0.6 * p["bce"] + 0.4 * p["dice"])))
    identity_ok = True
    for _ in range(200):
        pa, pb = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
        pc, tc, inter = L.overlap_counts(pa, pb, 3)
        for k in range(3):
            if pc[k] + tc[k]:
                dice = Fraction(2 * int(inter[k]), int(pc[k] + tc[k]))
                j = Fraction(int(inter[k]), int(pc[k] + tc[k] - inter[k]))
                identity_ok &= dice == 2 * j / (1 + j)
    clip_ok = D.clip_normalize(75.0, -125, 275) == 0.5
    verdict(6, "loss semantics", worst <= 1e-12 and identity_ok and clip_ok, t0, 60,
            f"(recomposition {worst:.1e}; dice/IoU identity {identity_ok}; clip 75->0.5 {clip_ok})")


# --- 7 ---------------------------------------------------------------------------

def test_criterion_07_learning_smoke(overfit_run, tmp_path):
    t0 = time.perf_counter()
    pred = TR.predict(overfit_run.model, overfit_run.images)
    overfit_dice = float(np.nanmean(L.dice_score(pred, overfit_run.labels, 4)[1:]))
    run = TR.RunConfig(epochs=40, batch_size=4, seed=0, synth_count=200, eval_every=5,
                       network=M.NetworkConfig(input_size=(64, 64), base_width=8,
                                               dtype="float32"))
    result = TR.train(run, tmp_path)
    ok = overfit_dice >= 0.95 and result.best_eval >= 0.85
    verdict(7, "learning smoke", ok, t0, 3600,
            f"(overfit dice {overfit_dice:.4f}; toy held-out dice {result.best_eval:.4f} "
            f"after {run.epochs} epochs)")


# --- 8 ---------------------------------------------------------------------------

def test_criterion_08_ablations(tmp_path):
    t0 = time.perf_counter()
    ds = D.synth_dataset(D.SynthSpec(), 10, val_fraction=0.2)
    grouping = L.ClassGrouping.from_text(D.SynthSpec().grouping_text())
    headers, failures = set(), []
    combos = [set(c) for n in range(5) for c in itertools.combinations(M.ABLATION_FLAGS, n)]
    for i, flags in enumerate(combos):
        cfg = M.ablate(M.NetworkConfig(dtype="float32"), flags)
        run = TR.RunConfig(epochs=2, batch_size=4, seed=0, network=cfg)
        try:
            res = TR.train(run, tmp_path / f"run{i}", ds)
            rep = TR.evaluate(res.model, ds.split("val"), grouping)
            lines = rep.to_csv().splitlines()
            headers.add((lines[0], lines[1], tuple(ln.split(",")[0] for ln in lines[2:])))
        except Exception as exc:  # recorded, reported below
            failures.append(f"{sorted(flags)}: {exc}")
    ok = len(combos) == 16 and not failures and len(headers) == 1
    verdict(8, "ablation machinery", ok, t0, 1800,
            f"({len(combos)} combinations, {len(failures)} failures, "
            f"{len(headers)} distinct report layouts)" + (f" first: {failures[0]}" if failures else ""))


# --- 9 ---------------------------------------------------------------------------

def test_criterion_09_diagnostics(tmp_path):
    t0 = time.perf_counter()
    ds = D.synth_dataset(D.SynthSpec(), 8, val_fraction=0.25)
    schemas, problems = [], []
    for mode in ("stagger", "unstagger"):
        cfg = M.NetworkConfig(dtype="float32", fusion_mode=mode)
        TR.train(TR.RunConfig(epochs=1, batch_size=4, network=cfg), tmp_path / mode, ds)
        rep = TR.diagnose(tmp_path / mode / "last.snck", ds, out_dir=tmp_path / mode / "diag")
        residual = max(rep.identity_residuals())
        if residual > 1e-9:
            problems.append(f"{mode} identity residual {residual:.1e}")
        if not all(p.cnn_stage > p.vit_stage for p in rep.selected):
            problems.append(f"{mode} selected pair violates stagger")
        schemas.append((rep.to_csv().splitlines()[0], [r.pair for r in rep.rows],
                        rep.han_csv().splitlines()[0], rep.pairs_csv().splitlines()[0]))
    if schemas[0] != schemas[1]:
        problems.append("schemas differ")
    verdict(9, "diagnostics pipeline", not problems, t0, 300,
            "(" + ("; ".join(problems) or "stagger and unstagger reports share one schema") + ")")


# --- 10 --------------------------------------------------------------------------

def test_criterion_10_determinism_io(tmp_path):
    t0 = time.perf_counter()
    ds = D.synth_dataset(D.SynthSpec(size=32), 6, val_fraction=1 / 3)
    cfg = M.NetworkConfig(input_size=(32, 32), base_width=4)
    run = TR.RunConfig(epochs=2, batch_size=2, network=cfg)
    a = TR.train(run, tmp_path / "a", ds)
    b = TR.train(run, tmp_path / "b", ds)
    traj = [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    ck = (tmp_path / "a" / "last.snck").read_bytes() == (tmp_path / "b" / "last.snck").read_bytes()
    rng = np.random.default_rng(10)
    x = rng.standard_normal((3, 224, 224)).astype(np.float32)
    stnt = decode_tensor(encode_tensor(x)).tobytes() == x.tobytes()
    state = a.model.state()
    back = decode_checkpoint(encode_checkpoint(state))
    ck_rt = list(back) == list(state) and all(
        back[k].dtype == state[k].dtype and back[k].tobytes() == state[k].tobytes() for k in state)
    restored = M.SNet.from_state(back)
    img = rng.standard_normal((2, 1, 32, 32))
    logits = np.array_equal(M.forward(a.model, img)[0].data, M.forward(restored, img)[0].data)
    ok = traj and ck and stnt and ck_rt and logits
    verdict(10, "determinism and IO", ok, t0, 120,
            f"(trajectories {traj}; checkpoints {ck}; STNT {stnt}; SNCK {ck_rt}; logits {logits})")
