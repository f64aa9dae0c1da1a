package fx;

public abstract class SubMap extends ImplementsMap {}
