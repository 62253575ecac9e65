"""Scratch experiment: does training reach >= 0.90 held-out greedy accuracy?"""
import sys
import time

import numpy as np

from seqroute.agents import ScriptedBackend
from seqroute.encoding import HashingTrigramEncoder
from seqroute.orchestrator import EpisodeConfig, run_episode
from seqroute.router import RouterConfig, RouterParams, RouterPolicy
from seqroute.suites import make_catalog, make_chain_suite
from seqroute.trainer import TrainConfig, train


def evaluate(policy, tasks, catalog):
    correct = 0
    lengths = []
    for i, task in enumerate(tasks):
        res = run_episode(task.query, catalog, policy, ScriptedBackend(task, catalog),
                          EpisodeConfig(), "infer", np.random.default_rng([1, i]))
        correct += res.final_answer == task.answer
        lengths.append(res.length)
    return correct / len(tasks), float(np.mean(lengths))


def main(lr=0.05, momentum=0.0, clip=5.0, seed=7, budget=1000, d_model=64, layers=2, heads=4,
         d_ff=256, alpha=1.5, temperature=1.0, open_gate=4.0, suite_seed=1234):
    catalog = make_catalog()
    train_tasks = make_chain_suite(seed=suite_seed, n_tasks=80, split="train")
    eval_tasks = make_chain_suite(seed=suite_seed, n_tasks=100, split="eval")

    config = RouterConfig(d_model=d_model, layers=layers, heads=heads, d_ff=d_ff,
                          alpha=alpha, temperature=temperature, open_gate_init=open_gate)
    params = RouterParams(config, np.random.default_rng(np.random.SeedSequence([seed, 1])))
    encoder = HashingTrigramEncoder()
    policy = RouterPolicy(params, encoder)

    t0 = time.time()
    acc0, len0 = evaluate(policy, eval_tasks, catalog)
    print(f"pre-train accuracy={acc0:.3f} mean_l={len0:.2f} ({time.time()-t0:.1f}s)")

    tcfg = TrainConfig(budget=budget, questions=80, threshold=1, learning_rate=lr,
                       momentum=momentum, grad_clip=clip, seed=seed)
    t0 = time.time()
    from seqroute.trainer import question_groups, normalize_advantages, pg_loss, sparsity_loss, total_loss, scripted_backend_factory, SGD, make_trajectory
    import seqroute.autodiff as ad
    opt = SGD(params.params(), tcfg.learning_rate, tcfg.momentum, tcfg.grad_clip)
    rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, 7001]))
    batches = []
    probe = eval_tasks[::5]
    for bi, (task, group) in enumerate(question_groups(train_tasks, policy, catalog,
            scripted_backend_factory(catalog), tcfg, EpisodeConfig(), rng)):
        advs = normalize_advantages([t.reward for t in group])
        for t_, a in zip(group, advs): t_.advantage = float(a)
        if np.any(advs != 0):
            gn = [g for t_ in group for g in t_.gate_nodes]
            loss = total_loss(pg_loss(group), sparsity_loss(gn, tcfg.sparsity_weight))
            ad.backward(loss); opt.step(); opt.zero()
        batches.append({"mean_reward": float(np.mean([t_.reward for t_ in group])),
                        "corrects": sum(t_.correct for t_ in group),
                        "trajectories": len(group)})
        for t_ in group: t_.release_graph()
        if bi % 10 == 9:
            acc, _ = evaluate(policy, probe, catalog)
            print(f"  [probe] batch {bi}: greedy acc={acc:.2f}")
    class R: pass
    result = R(); result.batches = batches; result.consumed = sum(b['trajectories'] for b in batches)
    dt = time.time() - t0
    print(f"train: {result.consumed} trajectories in {dt:.1f}s "
          f"({1000*dt/result.consumed:.0f} ms/traj), {len(result.batches)} batches")
    # per-epoch-ish reward trace
    n = len(result.batches)
    for chunk in range(0, n, max(1, n // 10)):
        bs = result.batches[chunk : chunk + max(1, n // 10)]
        mr = np.mean([b["mean_reward"] for b in bs])
        mc = np.mean([b["corrects"] / b["trajectories"] for b in bs])
        print(f"  batches {chunk:4d}+: mean_reward={mr:.3f} correct_rate={mc:.3f}")

    t0 = time.time()
    acc1, len1 = evaluate(policy, eval_tasks, catalog)
    print(f"post-train accuracy={acc1:.3f} mean_l={len1:.2f} ({time.time()-t0:.1f}s)")
    # per-length accuracy
    by_len = {}
    for task in eval_tasks:
        res = run_episode(task.query, catalog, policy, ScriptedBackend(task, catalog),
                          EpisodeConfig(), "infer", np.random.default_rng(0))
        k = len(task.chains[0][0])
        by_len.setdefault(k, []).append(res.final_answer == task.answer)
    for k in sorted(by_len):
        v = by_len[k]
        print(f"  chain-{k}: {np.mean(v):.3f} over {len(v)}")


if __name__ == "__main__":
    kwargs = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kwargs[k] = float(v) if "." in v else int(v)
    main(**kwargs)
