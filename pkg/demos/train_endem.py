"""Training an energy network on the 40-mode mixture.

An MLP energy model is regressed onto Monte Carlo energy targets at samples
drawn from its own reverse SDE (EnDEM), or onto bootstrapped targets for the
higher noise levels (BEnDEM). After training, 1000 samples are compared with
an exact draw. The full budget is --outer 200 --inner 100 (about 15 minutes
for EnDEM); the defaults are a short run that shows the loop working.

    python3 demos/train_endem.py [--method endem|bendem] [--outer 30] [--inner 100]
"""
import argparse
import math

from boltzgen import metrics as M
from boltzgen.config import resolve_config
from boltzgen.energy import energy_from_config
from boltzgen.network import net_from_config
from boltzgen.sampler import IntegrationConfig, reverse_sde_integrate
from boltzgen.schedule import schedule_from_config
from boltzgen.testsets import make_testset
from boltzgen.training import TrainConfig, default_net, train, trained_sampler_score

ap = argparse.ArgumentParser()
ap.add_argument("--method", default="endem", choices=["endem", "bendem"])
ap.add_argument("--outer", type=int, default=30)
ap.add_argument("--inner", type=int, default=100)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

cfg = resolve_config({"energy": {"kind": "gmm"}, "seed": args.seed,
                      "training": {"method": args.method, "outer_iters": args.outer, "inner_iters": args.inner}})
E = energy_from_config(cfg["energy"])
sched = schedule_from_config(cfg["schedule"])
tcfg = TrainConfig(schedule=sched, seed=args.seed, **cfg["training"])
net = net_from_config({**default_net(E, args.method).config(), **cfg["network"]})


def progress(it, tr):
    if (it + 1) % 10 == 0:
        recent = tr.losses[-args.inner:] or [float("nan")]
        print(f"outer {it + 1:4d}  step {tr.step:6d}  mean loss {sum(recent) / len(recent):10.4f}")


net, params, report = train(E, tcfg, net=net, progress=progress)
if report.get("bootstrap_fraction") is not None:
    print(f"fraction of steps that used bootstrap targets: {report['bootstrap_fraction']:.3f}")

icfg = IntegrationConfig(L=tcfg.L, schedule=sched, batch=1000, seed=10_000 + args.seed, clamp=tcfg.sample_clamp)
x = E.to_physical(reverse_sde_integrate(trained_sampler_score(net, params, E, args.method), icfg, d=2))
test = make_testset(E, 1000, seed=0)[0]
print(f"x-W2     {M.w2(x, test):.3f}")
print(f"E-W2     {M.energy_w2(E._phys_energy(x), E._phys_energy(test)):.3f}")
print(f"TV       {M.total_variation(x, test, M.gmm_histogram()):.4f}")
print(f"coverage {M.mode_coverage(x, E.params.means, math.sqrt(E.params.component_variance))}/40")
