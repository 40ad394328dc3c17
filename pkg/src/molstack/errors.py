"""Exception types shared across the toolkit."""


class MolstackError(Exception):
    """Base class for every error raised by this package."""


class InputError(MolstackError):
    """A data file is malformed (bad header, bad field, wrong record shape)."""


# --- SMILES parsing ---------------------------------------------------------

class EmptyInput(MolstackError):
    """The SMILES string is empty or whitespace only."""


class UnsupportedToken(MolstackError):
    """A token outside the supported SMILES grammar subset."""


class UnmatchedRingClosure(MolstackError):
    """A ring-closure digit was opened but never closed."""


class UnbalancedParenthesis(MolstackError):
    """Branch parentheses do not balance."""


# --- token graphs -----------------------------------------------------------

class InconsistentRings(MolstackError):
    """A ring references an atom that does not exist in the molecule."""


# --- tensor engine ----------------------------------------------------------

class ShapeMismatch(MolstackError):
    """Operand shapes are incompatible for the requested operation."""


class NotScalar(MolstackError):
    """backward() called on a tensor with more than one element."""


class DegenerateVector(MolstackError):
    """A zero-norm row where a direction is required (cosine loss)."""


# --- models / training ------------------------------------------------------

class DivergedLoss(MolstackError):
    """Training loss became non-finite."""


class StepOutOfRange(MolstackError):
    """Scheduler queried outside [0, total_steps]."""


class EmptyGraph(MolstackError):
    """A pooling operation met a graph with no nodes."""


class MissingConformer(MolstackError):
    """A 3D channel is active but no conformer was supplied."""


# --- stacking ---------------------------------------------------------------

class TooFewExamples(MolstackError):
    """Fewer examples than folds."""


class MissingPrediction(MolstackError):
    """A required (example, model) prediction cell is absent."""


class DuplicateCell(MolstackError):
    """The same (example, model) cell appears twice."""


class NoFoldsAvailable(MolstackError):
    """A model has no usable fold checkpoints at all."""


class UnknownColumn(MolstackError):
    """A referenced prediction column does not exist."""


class SingularSystem(MolstackError):
    """The regression design matrix is rank deficient."""


class NonConvergence(MolstackError):
    """Iterative fitting failed to converge within the iteration budget."""


class LengthMismatch(MolstackError):
    """Vectors that must be aligned have different lengths."""
