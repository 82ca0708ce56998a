import numpy as np
import pytest

from delayhb.model import NodeModel, PrimerParams, RingTopology, SigmoidParams, WilsonCowanParams
from delayhb.simulate import HistoryFunction, integrate
from delayhb.solver import HBProblem, initial_guess_from_simulation, solve_orbit


def primer(beta, w, I, tau=2.0, topology=None):
    return NodeModel(PrimerParams(w=w, I=I, sigmoid=SigmoidParams(beta), tau=tau), topology)


def wc_node(tau0=0.2):
    return NodeModel(WilsonCowanParams(tau0=tau0))


def wc_ring(tau_inter, eps=1.0):
    topo = RingTopology.exp_decay(7, 2.0, 0.2, tau_inter, eps=eps)
    return NodeModel(WilsonCowanParams(tau0=1.5), topo)


def cosine_guess(M, T, mean=0.5, amplitude=0.45, p=1):
    t = T * np.arange(-M, M + 1) / (2 * M + 1)
    return np.repeat(mean + amplitude * np.cos(2 * np.pi * t / T), p), T


def orbit_from_simulation(model, M, history, t_end, dt):
    sim = integrate(model, HistoryFunction.constant(np.tile(history, (model.N, 1))), t_end, dt)
    guess = initial_guess_from_simulation(model, sim, M)
    return solve_orbit(guess, HBProblem.create(model, M))


def primer_ring(N, eps=1.0, tau_inter=1.0, beta=20.0):
    return primer(beta, -1.0, 0.5, tau=2.0, topology=RingTopology.geometric(N, 0.5, 0.2, tau_inter, eps=eps))



# ------------------------------------------------------------ monodromy oracle


def _lagrange(table, t, h):
    """Cubic Lagrange interpolation of samples ``table[j] = y(j h)``."""
    s = t / h
    j = min(max(int(np.floor(s)) - 1, 0), len(table) - 4)
    x = s - j
    w = np.array([-(x - 1) * (x - 2) * (x - 3) / 6, x * (x - 2) * (x - 3) / 2,
                  -x * (x - 1) * (x - 3) / 2, x * (x - 1) * (x - 2) / 6])
    return np.tensordot(w, table[j:j + 4], axes=1)


def brute_force_multipliers(model, orbit, segments=200):
    """Monodromy of the full variational ring system, built column by column
    from a piecewise-polynomial history on ``segments`` intervals."""
    N = model.N
    delays = model.delays
    B = np.array([b[0, 0] for b in model.coupling])
    beta, drive = model.beta, model.drive[0]
    tau_max = delays.max()
    h = tau_max / segments
    n_hist = segments + 1
    dim = N * n_hist
    T = orbit.T
    n_steps = int(np.ceil(T / h)) + 3

    def gain(t):
        x = orbit.evaluate(t - delays)[:, 0]
        s = 1.0 / (1.0 + np.exp(-beta * (drive + np.dot(B, x))))
        return beta * s * (1 - s)

    # table[j] holds y at time (j - segments) h for every basis column
    table = np.zeros((n_hist + n_steps + 1, N, dim))
    for i in range(N):
        for j in range(n_hist):
            table[j, i, i * n_hist + j] = 1.0
    shifts = [np.roll(np.arange(N), -k) for k in range(N)]

    def rhs(t, y):
        g = gain(t)
        acc = np.zeros_like(y)
        for k in range(N):
            if B[k] == 0:
                continue
            past = _lagrange(table, t - delays[k] + tau_max, h)
            acc += B[k] * past[shifts[k]]
        return -y + g * acc

    y = table[segments].copy()
    for n in range(n_steps):
        t = n * h
        k1 = rhs(t, y)
        k2 = rhs(t + h / 2, y + h / 2 * k1)
        k3 = rhs(t + h / 2, y + h / 2 * k2)
        k4 = rhs(t + h, y + h * k3)
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        table[segments + n + 1] = y
    mono = np.empty((dim, dim))
    for j in range(n_hist):
        t = T - tau_max + j * h
        mono[j::n_hist] = _lagrange(table, t + tau_max, h)
    return np.linalg.eigvals(mono)


@pytest.fixture(scope="session")
def unstable_primer():
    model = primer(80.0, 1.0, -0.5)
    return model, solve_orbit(cosine_guess(50, 2.44), HBProblem.create(model, 50))


@pytest.fixture(scope="session")
def stable_primer():
    model = primer(20.0, -1.0, 0.5)
    return model, solve_orbit(cosine_guess(50, 5.3), HBProblem.create(model, 50))


@pytest.fixture(scope="session")
def wc_node_orbit():
    model = wc_node()
    return model, orbit_from_simulation(model, 30, [0.3, 0.1], 200.0, 0.005)


@pytest.fixture(scope="session")
def wc_ring_orbit():
    model = wc_ring(0.2)
    return model, orbit_from_simulation(model, 80, [0.3, 0.1], 300.0, 0.01)


# ------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: list = []


def report(cid: str, ok: bool, detail: str) -> bool:
    """Record and print one acceptance verdict line."""
    line = f"ACCEPTANCE {cid} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
