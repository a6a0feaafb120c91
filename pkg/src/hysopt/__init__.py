"""placeholder during bootstrap; full API exports added with the modules."""

from hysopt.expr import Expr, ExprFunction, parse_expr

__version__ = "0.1.0"
