from .base import (BACKENDS, ROLES, PromptError, ProviderError, Providers, ResponseCache,
                   RetriableError, Role, RoleBinding, UsageLedger, build_providers,
                   load_config_file, load_prompt, parse_bindings, render_prompt, with_retries)
from .http import HttpBackend, http_call
from .simulated import (CORRECT, MISSING, SPURIOUS, WRONG, SimulatedBackend, SyntheticWorld,
                        draw_facts, sim_generate, sim_judge, sim_revise)
from .template import TemplateBackend, rule_compare

__all__ = [
    "BACKENDS", "ROLES", "PromptError", "ProviderError", "Providers", "ResponseCache",
    "RetriableError", "Role", "RoleBinding", "UsageLedger", "build_providers", "load_config_file",
    "load_prompt", "parse_bindings", "render_prompt", "with_retries", "HttpBackend", "http_call",
    "CORRECT", "MISSING", "SPURIOUS", "WRONG", "SimulatedBackend", "SyntheticWorld", "draw_facts",
    "sim_generate", "sim_judge", "sim_revise", "TemplateBackend", "rule_compare",
]
