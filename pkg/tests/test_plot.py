import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from statsamp.bridges import exact_denoiser
from statsamp.plot import (
    HEIGHT,
    MARGIN,
    WIDTH,
    CsvFormatError,
    data_bounds,
    read_trajectory,
    render_svg,
    scale_points,
    scatter_svg,
    trajectory_csv,
    trajectory_svg,
)
from statsamp.samplers import Kernel, KernelConfig, run_chains

from conftest import mixture_a, mixture_b

SVG = "{http://www.w3.org/2000/svg}"


def run(dim=2, n=3, steps=6, thin=2):
    gm = mixture_a() if dim == 2 else mixture_b()
    k = Kernel(KernelConfig("dmala", sigma=0.3), denoiser=exact_denoiser(gm, 0.3))
    return run_chains(k, np.zeros((n, dim)), steps, seed=1, thin=thin)


class TestTrajectoryCsv:
    def test_round_trip(self):
        res = run()
        traj = read_trajectory(trajectory_csv(res, 2))
        assert traj.thin == 2 and traj.dim == 2
        assert traj.header == ["chain", "step", "accepted", "x0", "x1"]
        assert len(traj.chain) == 3 * 4
        np.testing.assert_array_equal(traj.step[:4], [0, 2, 4, 6])
        np.testing.assert_allclose(traj.positions[4:8], res.trajectory[:, 1], rtol=1e-5, atol=1e-12)

    def test_layout(self):
        lines = trajectory_csv(run(n=2, steps=2, thin=1), 1).splitlines()
        assert lines[0] == "# thin=1"
        assert lines[1] == "chain,step,accepted,x0,x1"
        assert [ln.split(",")[:2] for ln in lines[2:]] == [["0", "0"], ["0", "1"], ["0", "2"],
                                                           ["1", "0"], ["1", "1"], ["1", "2"]]

    def test_deterministic(self):
        assert trajectory_csv(run(), 2) == trajectory_csv(run(), 2)

    @pytest.mark.parametrize("text,line", [
        ("chain,step,x0\n", 1),
        ("chain,step,accepted\n", 1),
        ("# thin=2\nchain,step,accepted,x0\n0,0,1\n", 3),
        ("chain,step,accepted,x0\n0,0,1,0.5\n0,1,1,abc\n", 3),
        ("chain,step,accepted,x0\n0,0,1,nan\n", 2),
        ("# thin=two\nchain,step,accepted,x0\n", 1),
        ("# only a comment\n", 1),
        ("", 1),
    ])
    def test_errors_report_line(self, text, line):
        with pytest.raises(CsvFormatError) as info:
            read_trajectory(text)
        assert info.value.line == line
        assert str(info.value).startswith(f"line {line}:")

    def test_header_only(self):
        traj = read_trajectory("chain,step,accepted,x0,x1\n")
        assert traj.positions.shape == (0, 2)


class TestGeometry:
    def test_bounds_padded(self):
        b = data_bounds([np.array([[0.0, 0.0], [10.0, 2.0]])])
        assert b == pytest.approx((-0.5, 10.5, -0.1, 2.1))

    def test_bounds_empty_and_degenerate(self):
        assert data_bounds([]) == (-1.0, 1.0, -1.0, 1.0)
        assert data_bounds([np.array([[2.0, 3.0]])]) == (1.0, 3.0, 2.0, 4.0)

    def test_scale_corners(self):
        frame = (10, 20, 100, 50)
        px = scale_points([[0.0, 0.0], [1.0, 1.0]], (0.0, 1.0, 0.0, 1.0), frame)
        # y grows upward in data space and downward in pixels
        np.testing.assert_allclose(px, [[10, 70], [110, 20]])


def parse_svg(text):
    return ET.fromstring(text.split("\n", 1)[1])


class TestSvg:
    def test_empty_trajectory_has_axes(self):
        root = parse_svg(trajectory_svg(read_trajectory("chain,step,accepted,x0,x1\n")))
        assert root.findall(f".//{SVG}rect")
        assert not root.findall(f".//{SVG}circle")
        assert not root.findall(f".//{SVG}polyline")

    def test_single_point_marker(self):
        traj = read_trajectory("chain,step,accepted,x0,x1\n0,0,1,2.0,3.0\n")
        root = parse_svg(trajectory_svg(traj))
        (c,) = root.findall(f".//{SVG}circle")
        # a lone point sits in the middle of its padded unit box
        assert float(c.get("cx")) == pytest.approx(WIDTH / 2, abs=0.01)
        assert float(c.get("cy")) == pytest.approx(HEIGHT / 2, abs=0.01)
        assert MARGIN <= float(c.get("cx")) <= WIDTH - MARGIN

    def test_one_polyline_per_chain(self):
        root = parse_svg(trajectory_svg(read_trajectory(trajectory_csv(run(n=4), 2))))
        assert len(root.findall(f".//{SVG}polyline")) == 4
        assert len(root.findall(f".//{SVG}circle")) == 4

    def test_one_dimensional_against_step(self):
        root = parse_svg(trajectory_svg(read_trajectory(trajectory_csv(run(dim=1, n=2), 2))))
        assert len(root.findall(f".//{SVG}polyline")) == 2

    def test_deterministic_bytes(self):
        text = trajectory_csv(run(), 2)
        assert trajectory_svg(read_trajectory(text)) == trajectory_svg(read_trajectory(text))

    def test_self_contained(self):
        svg = scatter_svg([("a", np.zeros((3, 2))), ("b", np.ones((2, 1)))])
        assert "href" not in svg and "<image" not in svg
        root = parse_svg(svg)
        assert root.get("width") == str(2 * WIDTH)
        assert len(root.findall(f".//{SVG}circle")) == 5

    def test_title_escaped(self):
        svg = render_svg([("a<b & c", [])])
        assert "a&lt;b &amp; c" in svg
        parse_svg(svg)

    def test_fixed_precision(self):
        svg = scatter_svg([("p", np.random.default_rng(0).normal(size=(5, 2)))])
        for v in re.findall(r'c[xy]="([^"]+)"', svg):
            assert re.fullmatch(r"-?\d+\.\d\d", v)
