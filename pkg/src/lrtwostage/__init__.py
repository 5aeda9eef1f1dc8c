"""Two-stage subgroup effect estimation with posterior-induced subgroups."""
