"""Independent closed-form reward oracle with the cost table typed in by hand."""

TABLE_COSTS = (0.01, 0.05, 0.10, 0.20, 0.25, 0.10, 0.15, 0.20,
               0.20, 0.30, 0.40, 0.25, 0.20, 0.15, 0.30,
               0.20, 0.25, 0.35, 0.20, 0.80, 0.40, 0.50,
               0.40, 0.30, 0.90, 0.15, 0.80, 0.20, 0.20)
AWARE_ALPHA = (0.3, 0.5, 0.8, 1.0, 1.3, 1.5, 2.0)
AWARE_BETA = (0.0, 0.5, 0.7, 1.0, 1.3, 1.6, 2.0)
LAMBDA = 0.1


def oracle_security(k, k2):
    return {True: 1.0}.get(k2 < k, 0.5 if k2 == k else 0.0)


def oracle_reward(k, k2, a, aware=True):
    alpha = AWARE_ALPHA[k] if aware else 1.0
    beta = AWARE_BETA[k] if aware else 1.0
    return alpha * oracle_security(k, k2) - beta * LAMBDA * TABLE_COSTS[a]
