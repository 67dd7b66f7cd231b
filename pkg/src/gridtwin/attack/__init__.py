"""Attack primitives and the stage engine."""
from .engine import (STAGE_KINDS, AttackEngine, AttackerState, ScriptError, Stage, StageRun, script_errors)
from .mitm import ACTIONS, Interceptor, RewriteRecord, RewriteRule, RuleError, rule_errors
