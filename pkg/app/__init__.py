# Confusing-group subnets and weighted cross-entropy
