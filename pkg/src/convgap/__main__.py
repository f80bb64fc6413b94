from convgap.cli import main

main()
