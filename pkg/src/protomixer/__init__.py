"""ProtoMixer: k-means prototype bags fed to a domain-adversarial MLP-Mixer."""
