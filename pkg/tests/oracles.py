"""Independent reference computations shared by the unit and acceptance tests."""
import itertools

import numpy as np


def forward_value(game, mu, nu):
    """Expected return by pushing the state distribution forward (no backward induction)."""
    d = np.zeros(game.S)
    d[game.initial_state] = 1.0
    total = 0.0
    for h in range(game.H):
        joint = mu[h][:, :, None] * nu[h][:, None, :]  # (S, A, B)
        total += float(np.sum(d[:, None, None] * joint * game.reward[h]))
        d = np.einsum("s,sab,sabt->t", d, joint, game.transition[h])
    return total


def deterministic_policies(H, S, K):
    """Every deterministic Markov policy as a one-hot ``(H, S, K)`` array."""
    for choice in itertools.product(range(K), repeat=H * S):
        pol = np.zeros((H, S, K))
        idx = np.asarray(choice).reshape(H, S)
        for h in range(H):
            pol[h, np.arange(S), idx[h]] = 1.0
        yield pol


def enum_min_response(game, mu):
    return min(forward_value(game, mu, nu) for nu in deterministic_policies(game.H, game.S, game.B))


def enum_max_response(game, nu):
    return max(forward_value(game, mu, nu) for mu in deterministic_policies(game.H, game.S, game.A))


def random_policy(rng, H, S, K):
    return rng.dirichlet(np.ones(K), size=(H, S))


def mwu_reference(Q_upper, Q_lower, H, N):
    """Plain-loop Hedge self-play for a single (A, B) payoff pair."""
    A, B = Q_upper.shape
    Lu, Ll = (H - Q_upper) / H, Q_lower / H
    Oa, Ob = np.zeros(A), np.zeros(B)
    ea, eb = np.sqrt(np.log(A) / N), np.sqrt(np.log(B) / N)
    total = np.zeros((A, B))
    for _ in range(N):
        mu = np.exp(-ea * Oa - np.max(-ea * Oa))
        mu /= mu.sum()
        nu = np.exp(-eb * Ob - np.max(-eb * Ob))
        nu /= nu.sum()
        total += np.outer(mu, nu)
        Oa = Oa + Lu @ nu
        Ob = Ob + mu @ Ll
    return total / N


def cce_deviation_gaps(Q_upper, Q_lower, joint):
    """Both fixed-deviation gains written out as explicit loops over pure deviations."""
    A, B = joint.shape
    on_path_up = sum(joint[a, b] * Q_upper[a, b] for a in range(A) for b in range(B))
    on_path_lo = sum(joint[a, b] * Q_lower[a, b] for a in range(A) for b in range(B))
    max_dev = max(sum(joint[a, b] * Q_upper[a2, b] for a in range(A) for b in range(B))
                  for a2 in range(A))
    min_dev = min(sum(joint[a, b] * Q_lower[a, b2] for a in range(A) for b in range(B))
                  for b2 in range(B))
    return max_dev - on_path_up, on_path_lo - min_dev
