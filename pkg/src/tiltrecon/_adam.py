import torch


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update on dicts of tensors; returns (new_params, new_state)."""
    b1, b2 = betas
    step = state.get("step", 0) + 1
    m_old = state.get("m", {})
    v_old = state.get("v", {})
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * m_old.get(name, torch.zeros_like(p)) + (1 - b1) * g
        v = b2 * v_old.get(name, torch.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        new_params[name] = p - lr * m_hat / (v_hat.sqrt() + eps)
        m_new[name], v_new[name] = m, v
    return new_params, {"step": step, "m": m_new, "v": v_new}
