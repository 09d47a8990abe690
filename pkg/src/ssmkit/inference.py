"""Engine-agnostic drivers.

An engine is any object with ``initialise(rng, model, context)``,
``predict(rng, model, step, state, context)`` and
``update(model, step, state, observation, context) -> (state, log_increment)``.
"""
from ssmkit.models import EMPTY_CONTEXT


def step(rng, model, alg, iter, state, observation, context=EMPTY_CONTEXT):
    """One predict-update cycle; returns ``(filtered_state, log_increment)``."""
    proposed = alg.predict(rng, model, iter, state, context)
    return alg.update(model, iter, proposed, observation, context)


def filter(rng, model, alg, observations, contexts=None, callback=None):
    """Run ``alg`` over ``observations``; returns ``(final_state, log_evidence)``.

    ``callback(t, state, log_increment)`` is invoked after every step with
    ``t = 1..T``.  Particle engines mutate and return the same container.
    """
    observations = list(observations)
    if not observations:
        raise ValueError("need at least one observation")
    if contexts is not None:
        contexts = list(contexts)
        if len(contexts) != len(observations):
            raise ValueError("contexts and observations differ in length")
    state = alg.initialise(rng, model, EMPTY_CONTEXT)
    total = 0.0
    for t, y in enumerate(observations, start=1):
        ctx = EMPTY_CONTEXT if contexts is None else contexts[t - 1]
        state, ll = step(rng, model, alg, t, state, y, ctx)
        total = total + ll
        if callback is not None:
            callback(t, state, ll)
    return state, total
