# Streams package
