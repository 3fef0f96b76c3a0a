# Training module
