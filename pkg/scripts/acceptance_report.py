"""Compare finished pipeline runs with published reference values.

Reads ``output/<config>/summary.json`` written by ``pointcycle run <config>``
for each shipped configuration and prints one row per reference quantity:
computed value, reference, deviation and whether it is within tolerance.
The same table is saved to ``output/acceptance.json``.

Run (after the pipelines):
  uv run python scripts/acceptance_report.py [lorenz circuit food_chain]
"""

from __future__ import annotations

import json
import math
import sys
from collections.abc import Callable
from datetime import UTC, datetime
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))
sys.path.insert(0, str(ROOT))

import pandas as pd

from pointcycle.pipeline import SUMMARY_FILE, load_config

OUT_PATH = ROOT / "output" / "acceptance.json"


def _mu(i: int) -> Callable[[dict], float]:
    return lambda s: s["hopf-cycle"]["multipliers"][i][0]


def _abs_lam(s: dict) -> float:
    return abs(s["eigenfunction"]["lam"])


def _convergence(t: float) -> Callable[[dict], float]:
    def get(s: dict) -> float:
        rows = s["extend-T"]["convergence"]
        return next(row["r"] for row in rows if math.isclose(row["T"], t))
    return get


def _nearest_fold(name: str, reference: float) -> Callable[[dict], float]:
    return lambda s: min(s["one-par"]["folds"][name], key=lambda v: abs(v - reference))


# (quantity, getter, reference, tolerance, relative?)
REFERENCES: dict[str, list[tuple[str, Callable[[dict], float], float, float, bool]]] = {
    "lorenz": [
        ("r_Hopf", lambda s: s["hopf-cycle"]["hopf"]["r"], 470.0 / 19.0, 1e-4, False),
        ("T+", lambda s: s["hopf-cycle"]["T_plus"], 0.816222, 1e-4, True),
        ("mu_u", _mu(0), 1.26094, 1e-3, True),
        ("mu_trivial", _mu(1), 1.0, 1e-6, False),
        ("mu_s", _mu(2), 1.13431e-5, 1e-2, True),
        ("|lambda|", _abs_lam, 0.231854, 1e-3, False),
        ("r(T=3)", _convergence(3.0), 24.0579, 1e-3, False),
        ("r(T=6)", _convergence(6.0), 24.057900322267, 1e-5, False),
    ],
    "circuit": [
        ("T+", lambda s: s["hopf-cycle"]["T_plus"], 6.3646138, 1e-3, True),
        ("mu_u", _mu(0), 18.85438, 1e-2, True),
        ("mu_trivial", _mu(1), 1.0, 1e-6, False),
        ("mu_s", _mu(2), 3.986051e-6, 5e-2, True),
    ],
    "food_chain": [
        ("xi2", lambda s: s["equilibrium"]["xi"][1], 1.0 / 6.0, 1e-9, False),
        ("d1_Hopf", lambda s: s["hopf-cycle"]["hopf"]["d1"], 0.51227, 1e-4, False),
        ("T+", lambda s: s["hopf-cycle"]["T_plus"], 24.282248, 1e-3, True),
        ("mu_u", _mu(0), 610.7464, 1e-2, True),
        ("mu_s", _mu(2), 0.6440615, 1e-3, True),
        ("|lambda|", _abs_lam, 0.439961, 1e-3, False),
        ("fold d1", _nearest_fold("d1", 0.280913), 0.280913, 1e-3, False),
        ("fold d2 (upper)", _nearest_fold("d2", 0.0130272), 0.0130272, 1e-4, False),
        ("fold d2 (lower)", _nearest_fold("d2", 9.51660e-3), 9.51660e-3, 1e-4, False),
    ],
}


def _rows(name: str, summary: dict) -> list[dict]:
    rows = []
    for quantity, getter, reference, tol, relative in REFERENCES[name]:
        try:
            value = float(getter(summary["stages"]))
        except (KeyError, IndexError, StopIteration, ValueError):
            rows.append({"config": name, "quantity": quantity, "value": None, "reference": reference,
                         "deviation": None, "tolerance": tol, "ok": False})
            continue
        deviation = abs(value - reference) / (abs(reference) if relative else 1.0)
        rows.append({"config": name, "quantity": quantity, "value": value, "reference": reference,
                     "deviation": deviation, "tolerance": tol, "ok": deviation <= tol})
    return rows


def main() -> None:
    names = sys.argv[1:] or list(REFERENCES)
    unknown = [n for n in names if n not in REFERENCES]
    if unknown:
        sys.exit(f"No reference values for: {', '.join(unknown)}")

    rows: list[dict] = []
    for name in names:
        path = load_config(name).output_dir / SUMMARY_FILE
        if not path.exists():
            print(f"[{name}] нет {path}, пропускаем")
            continue
        rows.extend(_rows(name, json.loads(path.read_text(encoding="utf-8"))))
    if not rows:
        sys.exit("Nothing to compare: run the pipelines first")

    frame = pd.DataFrame(rows)
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    failed = int((~frame["ok"]).sum())
    print()
    print(f"Итого: {len(frame) - failed}/{len(frame)} в пределах допуска")

    OUT_PATH.parent.mkdir(parents=True, exist_ok=True)
    OUT_PATH.write_text(
        json.dumps(
            {"evaluated_at": datetime.now(UTC).isoformat(timespec="seconds"), "rows": rows},
            ensure_ascii=False,
            indent=2,
        ),
        encoding="utf-8",
    )
    print(f"Saved → {OUT_PATH}")
    if failed:
        sys.exit(1)


if __name__ == "__main__":
    main()
