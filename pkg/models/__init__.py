# Models module initialization