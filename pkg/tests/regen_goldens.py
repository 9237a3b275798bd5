"""Regenerate tests/goldens.json. Run directly: python3 tests/regen_goldens.py"""

import json
from pathlib import Path

from goldens_lib import BUILDERS


def main() -> None:
    path = Path(__file__).parent / "goldens.json"
    values = {name: build() for name, build in sorted(BUILDERS.items())}
    path.write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")
    for name, value in values.items():
        print(f"{name}: {value}")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
