"""Desk-scale exact solver over a build's structural binaries.

Both engines branch only on the structural binaries (pruning switches and, in
quantized mode, weight digits); once those are fixed, forward propagation
determines every continuous value, the ReLU indicators follow the sign of the
pre-activations, and the pool selectors pick the first maximal cell.  The
winning candidate is always re-audited against the full model.

Constraints injected into the model after the build (and bound fixings on the
structural binaries themselves) are honored: fixings restrict the enumeration,
injected constraints are evaluated per candidate.
"""

import time
from dataclasses import dataclass

from .ir import Assignment
from .nnspec import TRAIN_BILINEAR


class OracleError(Exception):
    pass


class TimeoutExceededError(OracleError):
    pass


class TooManyBinariesError(OracleError):
    pass


class InfeasibleError(OracleError):
    pass


@dataclass
class SolveResult:
    assignment: Assignment
    objective: float
    proven: bool = True
    bound: float = None
    nodes: int = 0
    candidates: int = 0


def _structural_domains(build):
    """(name, [values]) per structural binary, honoring bound fixings."""
    model = build.model
    out = []
    for name in build.structural:
        v = model.variables[model.var_index[name]]
        if v.lo > 0.5:
            out.append((name, [1.0]))
        elif v.hi < 0.5:
            out.append((name, [0.0]))
        else:
            out.append((name, [0.0, 1.0]))
    return out


def _extra_constraints(build):
    return build.model.constraints[build.built_constraints:]


def _check_extras(build, extras, bits, tol):
    """Evaluate post-build injected constraints on the assembled candidate."""
    from .ir import _violation
    asg, _, _ = build.assemble(bits, tol)
    worst = 0.0
    for con in extras:
        lhs = sum(c * asg.values[r.name] for c, r in con.terms)
        worst = max(worst, _violation(lhs, con.sense, con.rhs))
    return worst


def iter_candidates(build, tol=1e-6):
    """All feasible structural candidates as (bits, objective), lexicographic."""
    domains = _structural_domains(build)
    extras = _extra_constraints(build)
    names = [n for n, _ in domains]

    def rec(idx, bits):
        if idx == len(domains):
            obj, viol, _ = build.complete(bits, tol)
            if viol <= tol and (not extras
                                or _check_extras(build, extras, bits, tol) <= tol):
                yield dict(bits), obj
            return
        name, dom = domains[idx]
        for val in dom:
            bits[name] = val
            yield from rec(idx + 1, bits)
        del bits[name]

    yield from rec(0, {})


def enumerate_exact(build, limit_bits=24, tol=1e-6, timeout=None):
    """Visit every structural assignment; return the proven global optimum.

    Ties break toward the lexicographically smallest binary vector, which the
    enumeration order delivers for free.  A timeout aborts with an error:
    a partial enumeration proves nothing.
    """
    if build.hyper.mode == TRAIN_BILINEAR:
        raise OracleError("bilinear mode admits no forward-determined completion")
    nbits = len(build.structural)
    if nbits > limit_bits:
        raise TooManyBinariesError(
            "%d structural binaries exceed the limit of %d" % (nbits, limit_bits))
    deadline = None if timeout is None else time.monotonic() + timeout
    best_bits = None
    best_obj = None
    count = 0
    for bits, obj in iter_candidates(build, tol):
        count += 1
        if deadline is not None and time.monotonic() > deadline:
            raise TimeoutExceededError("enumeration exceeded %gs" % timeout)
        if best_obj is None or obj < best_obj:
            best_obj = obj
            best_bits = bits
    if best_bits is None:
        raise InfeasibleError("no feasible structural assignment")
    asg, obj, viol = build.assemble(best_bits, tol)
    report = build.model.evaluate_assignment(asg, tol)
    if not report.ok:
        raise OracleError("winning candidate failed the full audit (worst %g)"
                          % report.max_violation)
    return SolveResult(assignment=asg, objective=best_obj,
                       candidates=count, nodes=2 ** nbits)


def branch_and_bound(build, budget=10 ** 7, limit_bits=24, tol=1e-6, timeout=None):
    """Depth-first search with the same order and tie-breaking as enumeration.

    A node's lower bound collects the objective contributions that its fixed
    bits already determine: the structural penalty of fixed pruning switches
    and the regularization of weights whose digits are all fixed.  The bound
    never decreases along a branch, so pruning at bound >= incumbent is safe.
    """
    if build.hyper.mode == TRAIN_BILINEAR:
        raise OracleError("bilinear mode admits no forward-determined completion")
    nbits = len(build.structural)
    if nbits > limit_bits:
        raise TooManyBinariesError(
            "%d structural binaries exceed the limit of %d" % (nbits, limit_bits))
    domains = _structural_domains(build)
    extras = _extra_constraints(build)
    triggers = build_triggers(build)

    deadline = None if timeout is None else time.monotonic() + timeout
    state = {"nodes": 0, "best_obj": None, "best_bits": None,
             "exhausted": False, "open_bound": None}

    def note_open(bound):
        if state["open_bound"] is None or bound < state["open_bound"]:
            state["open_bound"] = bound

    def rec(idx, bits, bound):
        if state["exhausted"]:
            return
        if state["nodes"] >= budget or (
                deadline is not None and state["nodes"] % 1024 == 0
                and time.monotonic() > deadline):
            state["exhausted"] = True
            note_open(bound)
            return
        state["nodes"] += 1
        if state["best_obj"] is not None and bound >= state["best_obj"]:
            return
        if idx == len(domains):
            obj, viol, _ = build.complete(bits, tol)
            if viol <= tol and (not extras
                                or _check_extras(build, extras, bits, tol) <= tol):
                if state["best_obj"] is None or obj < state["best_obj"]:
                    state["best_obj"] = obj
                    state["best_bits"] = dict(bits)
            return
        name, dom = domains[idx]
        for val in dom:
            bits[name] = val
            extra_bound = 0.0
            feasible = True
            for fn in triggers.get(name, ()):
                contrib, ok = fn(bits)
                extra_bound += contrib
                feasible = feasible and ok
            if feasible:
                rec(idx + 1, bits, bound + extra_bound)
        del bits[name]

    rec(0, {}, 0.0)

    proven = not state["exhausted"]
    if state["best_bits"] is None:
        if proven:
            raise InfeasibleError("no feasible structural assignment")
        return SolveResult(assignment=None, objective=None, proven=False,
                           bound=state["open_bound"] or 0.0,
                           nodes=state["nodes"])
    asg, obj, viol = build.assemble(state["best_bits"], tol)
    report = build.model.evaluate_assignment(asg, tol)
    if not report.ok:
        raise OracleError("incumbent failed the full audit (worst %g)"
                          % report.max_violation)
    bound = state["best_obj"] if proven else min(
        state["best_obj"], state["open_bound"] or 0.0)
    return SolveResult(assignment=asg, objective=state["best_obj"],
                       proven=proven, bound=bound, nodes=state["nodes"])


def build_triggers(build):
    """Map structural-bit name -> bound/feasibility callbacks fired when fixed."""
    from .dense import DenseBuild, vn
    hyper = build.hyper
    triggers = {}

    def add(name, fn):
        triggers.setdefault(name, []).append(fn)

    if isinstance(build, DenseBuild):
        gammas = [vn("gamma", h) for h in range(build.L)]
    else:
        gammas = [vn("gamma", l, c)
                  for l, layer in enumerate(build.arch.conv_layers)
                  for c in range(layer.filters)]

    for g in gammas:
        add(g, lambda bits, g=g: (hyper.beta * bits[g], True))
    # root/ordering checks once the relevant switches are known
    if isinstance(build, DenseBuild):
        add(gammas[0], lambda bits: (0.0, bits[gammas[0]] >= 0.5))
        for h in range(build.L - 1):
            add(gammas[h + 1],
                lambda bits, a=gammas[h], b=gammas[h + 1]:
                    (0.0, bits[b] <= bits[a] + 0.5))

    if build._digit_names:
        from .recon import QuantSpec
        quant = QuantSpec(hyper.bits, hyper.w_max)
        al = hyper.alpha * hyper.lam
        fr = 0.5 * hyper.alpha * (1.0 - hyper.lam)
        for key, names in build._digit_names.items():
            last = names[-1]
            is_bias = _is_bias_group(build, key)
            gate = _gamma_gate_name(build, key)

            def fn(bits, names=names, is_bias=is_bias, gate=gate):
                w = quant.decode([bits[d] for d in names])
                contrib = 0.0 if is_bias else al * abs(w) + fr * w * w
                ok = True
                if gate is not None and gate in bits and bits[gate] < 0.5:
                    ok = abs(w) <= 1e-9
                return contrib, ok

            add(last, fn)
    return triggers


def _is_bias_group(build, key):
    from .dense import DenseBuild
    if isinstance(build, DenseBuild):
        l, j, k = key
        return k == build.arch.widths[l]
    return key[0] in ("bc", "b")


def _gamma_gate_name(build, key):
    """Pruning switch gating this digit group, or None for ungated layers."""
    from .dense import DenseBuild, vn
    if isinstance(build, DenseBuild):
        l = key[0]
        return vn("gamma", l) if l < build.L else None
    kind = key[0]
    if kind in ("Wc", "bc"):
        l, c = key[1], key[2]
        return vn("gamma", l, c)
    return None
