"""Independent reference computations and frozen hand-derived values.

Nothing here imports the functions under test; each oracle recomputes its
quantity from the raw network tables.
"""

import numpy as np

# Hand arithmetic, frozen.  Keys describe the computation.
FROZEN = {
    "greenshields(d=0.075, vf=15, djam=0.15)": 15 * 0.075 - (15 / 0.15) * 0.075 ** 2,  # 0.5625
    "queue_update(5, out=2, in=1, A=0.5)": 5 - 2 + 1 + 0.5,  # 4.5
    "movement_pressure(10, 4)": 10.0 - 4.0,
    "phase_pressure((6,0.5),(-2,0.5))": 6 * 0.5 + (-2) * 0.5,  # 2.0
    "phase_pressure((6,0.5))": 3.0,
    "reward_flow({2,3})": -(2.0 + 3.0),
    "reward_pressure({2,-3})": -(2.0 + 3.0),
    "reward_waiting(3 veh x 5 s)": -15.0,
    "reward_queue({2,4})": -3.0,
    "B(0.5, 0.5, 0.4)": 0.5 ** 2 + (0.5 + 0.4) ** 2,  # 1.06
    "drift_linear(in=1, A=0.5, out=2)": 1 + 0.5 - 2,  # -0.5
    "lyapunov_linear({3,4})": 7.0,
    "lyapunov_quadratic({3,4})": (9 + 16) / 2,  # 12.5
    "doras efficiency(q=1, pred=0.5, cap=2.5)": min(1 + 0.5, 2.5),  # 1.5
    "ddqn target(r=-5, g=0.9, Qt=-10)": -5 + 0.9 * -10,  # -14
    "fixed-time cycle (25, 25) + 2x5": 25 + 25 + 2 * 5,  # 60
    "arrival mean 900 vph, dt 1": 900 / 3600,  # 0.25
    "green-wave offset 300 m / 15 m/s": 300 / 15,  # 20
}


def naive_phase_scores(network, state, node_id, weighting):
    """Per-phase weighted pressure computed from the raw tables.

    weighting: "saturation" or "greenshields" (min of saturation and the
    downstream lane's receiving flow, exits uncapped).
    """
    node = network.intersections[node_id]
    scores = {}
    for pid in node.phases:
        total = 0.0
        for mid in network.phases[pid].movements:
            mov = network.movements[mid]
            src = state.queue[mov.from_lane]
            dst_lane = network.lanes[mov.to_lane]
            dst = 0.0 if dst_lane.is_exit else state.queue[mov.to_lane]
            z = mov.saturation_flow
            if weighting == "greenshields" and not dst_lane.is_exit:
                d = (state.queue[dst_lane.id] + state.moving_count[dst_lane.id]) / dst_lane.length
                vf, dj = dst_lane.free_flow_speed, dst_lane.jam_density
                if d <= dj / 2:
                    supply = vf * dj / 4
                elif d >= dj:
                    supply = 0.0
                else:
                    supply = vf * d - vf / dj * d * d
                z = min(z, supply)
            total += (src - dst) * z
        scores[pid] = total
    return scores


def brute_force_choice(phases, scores, current):
    """Keep the current phase if it ties for best, else the lowest-index best."""
    best = max(scores.values())
    if scores[current] == best:
        return current
    for p in phases:
        if scores[p] == best:
            return p


def finite_difference_gradient(net, obs, action, y, h=1e-4):
    grads = []
    for p in net.params():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = 0.5 * (net.forward(obs)[action] - y) ** 2
            p[idx] = old - h
            down = 0.5 * (net.forward(obs)[action] - y) ** 2
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads
