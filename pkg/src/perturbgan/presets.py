"""Named desk-scale configurations shared by scripts and tests."""
from .trainer import TrainConfig

# small generator/critic pair sized for 2000 iterations on one CPU core. A critic
# narrower than 32 is close to linear and only matches the mean image; the larger
# step size lets batch-norm gains outgrow the unit-variance masks within the budget.
SMOKE_CONFIG = TrainConfig(
    batch_size=16, iterations=2000, lr=1e-3, beta1=0.5, generator="PGv1",
    g_base_width=64, discriminator="CD", d_base_width=32, dataset="synth:two-mode",
    n_data=2048, n_eval=1024, dtype="float32")

# tiny float64 pair for determinism and resume checks
TINY_CONFIG = TrainConfig(
    batch_size=8, latent_dim=16, iterations=200, generator="PGv1", g_base_width=8,
    discriminator="PD", d_base_width=8, dataset="synth:two-mode", n_data=256,
    n_eval=64, dtype="float64")
