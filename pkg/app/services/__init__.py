

__all__ = [
    "qops",
    "atom_cavity_model",
    "lindblad_solver",
    "fitting",
    "experiments",
    "effective_three_level",
    "config",
    "storage",
    "validation",
]
