"""Profiles and optimal degree of parallelism.

The bundled profile holds per-step denoising times and decoder times for
three video resolutions at parallelism degrees 1..8.  Doubling the degree
helps each resolution differently; the change rate of the step time picks
the sweet spot.
"""

from ditsim import (
    change_rate,
    default_profile,
    derive_dop_table,
    estimate_execution_time,
)

profile = default_profile()

print("Per-step denoising time (seconds) by degree of parallelism:")
print(f"{'resolution':>12} " + " ".join(f"{d:>9}" for d in profile.dop_candidates))
for res in profile.resolutions:
    row = " ".join(f"{profile.dit_step(res.name, d):9.6f}" for d in profile.dop_candidates)
    print(f"{res.name:>12} {row}   vae={profile.vae(res.name):.6f}")

print("\nChange rate when doubling the degree (1 - t(i) / t(i/2)):")
for res in profile.resolutions:
    rates = {d: change_rate(profile, res.name, d) for d in profile.dop_candidates if d >= 2}
    pretty = "  ".join(f"z({d})={z:+.4f}" for d, z in rates.items())
    print(f"{res.name:>12}  {pretty}")

# The optimal degree maximizes the change rate; when even the best doubling
# gains less than 5% the resolution runs on a single GPU.
dops = derive_dop_table(profile)
print("\nDerived optimal degrees:", dict(dops.by_resolution))
print("Decoder degree:", dops.vae_dop)

print("\nEnd-to-end estimates for a 30-step request (seconds):")
for res in profile.resolutions:
    best = dops.dit_dop(res.name)
    t1 = estimate_execution_time(profile, res.name, 1, 30)
    tb = estimate_execution_time(profile, res.name, best, 30)
    print(f"{res.name:>12}  single GPU: {t1:8.4f}   at optimal dop {best}: {tb:8.4f}")

# At its optimal degree of 4, the 360p decoder is 1/7th of the request:
# three of the four GPUs would idle through it without decoupling.
total = estimate_execution_time(profile, "360p", 4, 30)
print(f"\n360p at dop 4: decoder fraction = {profile.vae('360p') / total:.4f} (1/7)")
