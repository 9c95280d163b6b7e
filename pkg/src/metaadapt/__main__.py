from metaadapt.cli import main

main()
