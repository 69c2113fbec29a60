#!/usr/bin/env python3
"""Regenerate include/neas/mc_tables.hpp from a JavaScript source that holds
the classic 256-case marching-cubes tables (edgeTable, triTable), such as
three.js examples/jsm/objects/MarchingCubes.js."""

import re
import sys


def grab(text, name):
    m = re.search(name + r"\s*=\s*new Int32Array\(\s*\[(.*?)\]\s*\)", text, re.S)
    if not m:
        sys.exit(f"table {name} not found")
    # three.js formats negatives as "- 1".
    body = re.sub(r"\s+", "", m.group(1))
    return [int(tok, 0) for tok in re.findall(r"-?0x[0-9a-fA-F]+|-?\d+", body)]


def main():
    src = sys.argv[1] if len(sys.argv) > 1 else "/usr/lib/node_modules/three/examples/jsm/objects/MarchingCubes.js"
    out = sys.argv[2] if len(sys.argv) > 2 else "include/neas/mc_tables.hpp"
    text = open(src).read()
    edge = grab(text, "edgeTable")
    tri = grab(text, "triTable")
    assert len(edge) == 256 and len(tri) == 256 * 16, (len(edge), len(tri))
    lines = [
        "#pragma once",
        "",
        "// Classic marching-cubes lookup tables (P. Bourke / C. G. Bloyd).",
        "// Generated by tools/gen_mc_tables.py; do not edit.",
        "",
        "#include <array>",
        "#include <cstdint>",
        "",
        "namespace neas::mc {",
        "",
        "inline constexpr std::array<std::uint16_t, 256> kEdgeTable{{",
    ]
    for i in range(0, 256, 8):
        lines.append("    " + ", ".join(f"0x{v:03x}" for v in edge[i:i + 8]) + ",")
    lines.append("}};")
    lines.append("")
    lines.append("inline constexpr std::array<std::array<std::int8_t, 16>, 256> kTriTable{{")
    for c in range(256):
        row = tri[c * 16:(c + 1) * 16]
        lines.append("    {{" + ", ".join(str(v) for v in row) + "}},")
    lines.append("}};")
    lines.append("")
    lines.append("}  // namespace neas::mc")
    open(out, "w").write("\n".join(lines) + "\n")


if __name__ == "__main__":
    main()
