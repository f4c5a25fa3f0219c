"""Few-shot domain expansion for face anti-spoofing via style-transfer augmentation and semantic alignment."""
