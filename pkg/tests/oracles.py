"""Independent reference implementations the suite checks the package against.

Nothing here imports the code paths it checks; each oracle restates the rule
in the most direct form available.
"""

from quicecn.core import EcnCodepoint, MirrorClass


def validation_oracle(e0: int, e1: int, ce: int, n: int) -> MirrorClass:
    """Outcome for one final ACK carrying (e0, e1, ce) after n marked sends.

    When CE covers every testing packet the path is assumed to keep marking
    CE through the extension window.
    """
    if e1 > 0:
        return MirrorClass.REMARK_ECT1
    if ce > n or ce == n:
        return MirrorClass.ALL_CE
    if e0 + ce < n:
        return MirrorClass.UNDERCOUNT
    return MirrorClass.CAPABLE


def fold_codepoint(policies, sent):
    """Codepoint seen after each hop, by direct table lookup per policy name."""
    table = {
        "pass": lambda cp: cp,
        "quiet": lambda cp: cp,
        "silent": lambda cp: cp,
        "drop": lambda cp: cp,
        "bleach": lambda cp: EcnCodepoint.NOT_ECT,
        "remark-ect1": lambda cp: EcnCodepoint.ECT1 if cp == EcnCodepoint.ECT0 else cp,
        "mark-ce": lambda cp: EcnCodepoint.CE if cp != EcnCodepoint.NOT_ECT else cp,
    }
    seen = []
    cp = sent
    for name in policies:
        cp = table[name](cp)
        seen.append(cp)
    return seen
