"""Deep Context Interest Network for click-through-rate prediction."""
