from .ltlf import parse_ltlf, format_ltlf, eval_ltlf, chain_pattern
from .planrec import recognize
from .ctibridge import extract_plan

parse_ltlf
format_ltlf
eval_ltlf
chain_pattern
recognize
extract_plan

__version__ = "0.1.0"
