"""Fast structural audits: gradients, token budgets, plan cache, load balance, AGD oracle."""
import json

from impmoe.experiments import (as_record, budget_audit, gradient_audit, load_balance_run,
                                load_config, plan_cache_audit, quadratic_convergence)

out = {
    "gradients": gradient_audit(),
    "token_budget": budget_audit(),
    "plan_cache": plan_cache_audit(load_config("multimodal")),
    "load_balance": load_balance_run(load_config("tiny", **{"encoder.num_experts": 4})),
    "quadratic": {p: quadratic_convergence(policy=p) for p in ("balanced", "multinomial")},
}
print(json.dumps(as_record(out), indent=2))
