"""Label vocabularies shared across the pipeline."""

LUNG_CLASSES = ("Normal", "Crackle", "Wheeze", "Both")
DISEASE_CLASSES = ("Healthy", "Unhealthy")
META_CLASSES = {
    "age_group": ("Adult", "Pediatric"),
    "sex": ("Male", "Female"),
    "location": ("Trachea", "AnteriorLeft", "AnteriorRight", "PosteriorLeft", "PosteriorRight",
                 "LateralLeft", "LateralRight"),
    "stethoscope": ("Meditron", "LittC2SE", "Litt3200", "AKGC417L"),
}
