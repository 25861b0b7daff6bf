"""
Conditioning and timing sweep on observations scattered over the unit sphere.

Usage:
    python manage.py bench [--preset desk|table-a|table-b] [--sizes 1000,2000,4000]
        [--d 20 --degree 2 --nu 1.25 --rho 10 --tol 1e-3] [--output bench.csv]

Flags given explicitly (or in --config) override the preset. The CSV has one
row per size; a manifest JSON with the seed, host and cost exponent is
written next to it.
"""
from dataclasses import replace

from django.core.exceptions import ValidationError

from kriging.management.base import RunConfigCommand
from kriging.services.bench import PRESETS, run_conditioning_sweep

# RunConfig field -> SphereBenchSpec field
SPEC_FIELDS = {
    "d": "d",
    "sizes": "sizes",
    "nu": "nu",
    "rho": "rho",
    "degree": "degree",
    "tol": "tol",
    "seed": "seed",
    "convention": "convention",
}


class Command(RunConfigCommand):
    help = "Run the multilevel conditioning benchmark and write a CSV report"

    run_options = ("config", "output", "preset", "threads", *SPEC_FIELDS)

    def build_spec(self, config):
        if config.preset not in PRESETS:
            raise ValidationError(
                "Unknown preset %(preset)r; choose from %(presets)s.",
                code="parameter_domain",
                params={"preset": config.preset, "presets": sorted(PRESETS)},
            )
        overrides = {
            field: getattr(config, name) for name, field in SPEC_FIELDS.items() if name in config.explicit
        }
        spec = PRESETS[config.preset]
        if overrides:
            spec = replace(spec, label=f"{spec.label}+custom", **overrides)
        return spec

    def run(self, config, execution):
        spec = self.build_spec(config)
        output = config.output or f"bench_{spec.label.replace('+', '_')}.csv"

        self.stdout.write(self.style.MIGRATE_HEADING(
            f"Sphere benchmark '{spec.label}': d={spec.d} ({spec.convention}), degree={spec.degree}, "
            f"N={','.join(map(str, spec.sizes))}, threads={execution.threads}"
        ))
        result = run_conditioning_sweep(spec, execution)
        csv_path, manifest_path = result.write(output)

        for row in result.rows:
            self.stdout.write(
                f"  N={row['N']}: itr_C={row['itr_C']} itr_CW={row['itr_CW']} total={row['Total_s']:.2f}s"
            )
        if result.manifest.get("alpha") is not None:
            self.stdout.write(f"  cost exponent alpha = {result.manifest['alpha']:.3f}")
        self.stdout.write(self.style.SUCCESS(f"Wrote {csv_path} and {manifest_path}"))
